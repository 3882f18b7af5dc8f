use super::{shape_err, Op, Real, Reduce, Result, Tensor};

const LOG_FLOOR: f64 = 1e-12;

pub(super) fn forward<T: Real>(op: Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let arity = match op {
        Op::Add | Op::Sub | Op::Mul | Op::MatMul => 2,
        Op::Conv2d { .. } => {
            if inputs.len() == 3 {
                3
            } else {
                2
            }
        }
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(shape_err(
            op.name(),
            format!("expected {arity} inputs, got {}", inputs.len()),
        ));
    }
    match op {
        Op::Add => binary(op, inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => binary(op, inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => binary(op, inputs[0], inputs[1], |a, b| a * b),
        Op::MatMul => matmul(inputs[0], inputs[1]),
        Op::Conv2d { stride, pad } => conv2d(inputs[0], inputs[1], inputs.get(2).copied(), stride, pad),
        Op::LeakyRelu { slope } => {
            let s = T::of(slope);
            Ok(map(inputs[0], |v| if v > T::zero() { v } else { v * s }))
        }
        Op::Sigmoid => Ok(map(inputs[0], sigmoid)),
        Op::Tanh => Ok(map(inputs[0], |v| v.tanh())),
        Op::Log => {
            let floor = T::of(LOG_FLOOR);
            Ok(map(inputs[0], |v| v.max(floor).ln()))
        }
        Op::Abs => Ok(map(inputs[0], |v| v.abs())),
        Op::Sum(reduce) => reduce_sum(inputs[0], reduce, false),
        Op::Mean(reduce) => reduce_sum(inputs[0], reduce, true),
        Op::Pad { pad } => pad2d(inputs[0], pad),
        Op::Clamp01 => Ok(map(inputs[0], |v| v.max(T::zero()).min(T::one()))),
    }
}

/// Vector-Jacobian products. Entry `i` of the result is `None` when
/// `wanted[i]` is false.
pub(super) fn backward<T: Real>(
    op: Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    upstream: &Tensor<T>,
    wanted: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let g = upstream;
    let out = match op {
        Op::Add => {
            let (ga, gb) = binary_grads(inputs[0], inputs[1], g, wanted, |_, _, g| (g, g));
            vec![ga, gb]
        }
        Op::Sub => {
            let (ga, gb) = binary_grads(inputs[0], inputs[1], g, wanted, |_, _, g| (g, -g));
            vec![ga, gb]
        }
        Op::Mul => {
            let (ga, gb) =
                binary_grads(inputs[0], inputs[1], g, wanted, |a, b, g| (g * b, g * a));
            vec![ga, gb]
        }
        Op::MatMul => {
            let (ga, gb) = matmul_grads(inputs[0], inputs[1], g, wanted);
            vec![ga, gb]
        }
        Op::Conv2d { stride, pad } => {
            conv2d_grads(inputs[0], inputs[1], inputs.get(2).copied(), g, stride, pad, wanted)
        }
        Op::LeakyRelu { slope } => {
            let s = T::of(slope);
            vec![Some(zip_map(inputs[0], g, |x, g| if x > T::zero() { g } else { g * s }))]
        }
        Op::Sigmoid => vec![Some(zip_map(output, g, |y, g| g * y * (T::one() - y)))],
        Op::Tanh => vec![Some(zip_map(output, g, |y, g| g * (T::one() - y * y)))],
        Op::Log => {
            let floor = T::of(LOG_FLOOR);
            vec![Some(zip_map(inputs[0], g, |x, g| if x > floor { g / x } else { T::zero() }))]
        }
        Op::Abs => vec![Some(zip_map(inputs[0], g, |x, g| {
            if x > T::zero() {
                g
            } else if x < T::zero() {
                -g
            } else {
                T::zero()
            }
        }))],
        Op::Sum(reduce) => vec![Some(reduce_grad(inputs[0], g, reduce, false))],
        Op::Mean(reduce) => vec![Some(reduce_grad(inputs[0], g, reduce, true))],
        Op::Pad { pad } => vec![Some(unpad2d(inputs[0].shape(), g, pad))],
        Op::Clamp01 => vec![Some(zip_map(inputs[0], g, |x, g| {
            if x > T::zero() && x < T::one() {
                g
            } else {
                T::zero()
            }
        }))],
    };
    Ok(out
        .into_iter()
        .zip(wanted)
        .map(|(g, &w)| if w { g } else { None })
        .collect())
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map<T: Real>(x: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&g.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

/// Shapes must match exactly, or one side must hold a single value.
fn broadcast_shape<T: Real>(op: Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    if a.shape == b.shape || b.numel() == 1 {
        Ok(a.shape.clone())
    } else if a.numel() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(shape_err(
            op.name(),
            format!("{:?} vs {:?}", a.shape, b.shape),
        ))
    }
}

fn binary<T: Real>(op: Op, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a, b)?;
    let n: usize = shape.iter().product();
    let at = |i: usize| if a.numel() == 1 { a.data[0] } else { a.data[i] };
    let bt = |i: usize| if b.numel() == 1 { b.data[0] } else { b.data[i] };
    Ok(Tensor {
        shape,
        data: (0..n).map(|i| f(at(i), bt(i))).collect(),
    })
}

/// `f(a, b, g) -> (da, db)` per element; broadcast sides are summed back.
fn binary_grads<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    wanted: &[bool],
    f: impl Fn(T, T, T) -> (T, T),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = g.numel();
    let at = |i: usize| if a.numel() == 1 { a.data[0] } else { a.data[i] };
    let bt = |i: usize| if b.numel() == 1 { b.data[0] } else { b.data[i] };
    let mut da = vec![0.0f64; a.numel()];
    let mut db = vec![0.0f64; b.numel()];
    let broadcast_a = a.numel() == 1 && n != 1;
    let broadcast_b = b.numel() == 1 && n != 1;
    for i in 0..n {
        let (ga, gb) = f(at(i), bt(i), g.data[i]);
        da[if broadcast_a { 0 } else { i }] += ga.wide();
        db[if broadcast_b { 0 } else { i }] += gb.wide();
    }
    let pack = |t: &Tensor<T>, d: Vec<f64>, w: bool| {
        w.then(|| Tensor {
            shape: t.shape.clone(),
            data: d.into_iter().map(T::of).collect(),
        })
    };
    (pack(a, da, wanted[0]), pack(b, db, wanted[1]))
}

fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

fn matmul_grads<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    wanted: &[bool],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let ga = wanted[0].then(|| {
        // dA[i, p] = sum_j g[i, j] * b[p, j]
        let mut da = vec![T::zero(); m * k];
        for i in 0..m {
            for p in 0..k {
                da[i * k + p] = dot(&g.data[i * n..(i + 1) * n], &b.data[p * n..(p + 1) * n]);
            }
        }
        Tensor {
            shape: a.shape.clone(),
            data: da,
        }
    });
    let gb = wanted[1].then(|| {
        // dB[p, j] = sum_i a[i, p] * g[i, j]
        let mut db = vec![T::zero(); k * n];
        for i in 0..m {
            for p in 0..k {
                axpy(a.data[i * k + p], &g.data[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
            }
        }
        Tensor {
            shape: b.shape.clone(),
            data: db,
        }
    });
    (ga, gb)
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Real>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x.shape.len() != 4 || w.shape.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} and kernel {:?} must both be 4-D", x.shape, w.shape),
            ));
        }
        let [batch, cin, h, width] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let [cout, kcin, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || width + 2 * pad < kw || kh == 0 || kw == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{width} with padding {pad}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", b.shape),
                ));
            }
        }
        Ok(Self {
            batch,
            cin,
            h,
            w: width,
            cout,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (width + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one image `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_len();
        for c in 0..self.cin {
            let src = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back into an image.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_len();
        for c in 0..self.cin {
            let dst = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(x, w, bias, stride, pad)?;
    let (k, plane) = (geom.patch_len(), geom.out_len());
    let in_len = geom.cin * geom.h * geom.w;
    let mut cols = vec![T::zero(); k * plane];
    let mut out = vec![T::zero(); geom.batch * geom.cout * plane];
    for n in 0..geom.batch {
        geom.im2col(&x.data[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * geom.cout * plane..(n + 1) * geom.cout * plane];
        if let Some(b) = bias {
            for co in 0..geom.cout {
                dst[co * plane..(co + 1) * plane].fill(b.data[co]);
            }
        }
        gemm_nn(&w.data, &cols, dst, geom.cout, k, plane);
    }
    Ok(Tensor {
        shape: vec![geom.batch, geom.cout, geom.oh, geom.ow],
        data: out,
    })
}

fn conv2d_grads<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    wanted: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let geom = ConvGeom::new(x, w, bias, stride, pad).expect("validated in forward");
    let (k, plane) = (geom.patch_len(), geom.out_len());
    let in_len = geom.cin * geom.h * geom.w;
    let want_x = wanted[0];
    let want_w = wanted[1];
    let want_b = bias.is_some() && wanted.get(2).copied().unwrap_or(false);

    let mut dx = want_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = want_w.then(|| vec![T::zero(); w.numel()]);
    let mut db = want_b.then(|| vec![0.0f64; geom.cout]);
    let mut cols = vec![T::zero(); k * plane];
    let mut dcols = vec![T::zero(); k * plane];

    for n in 0..geom.batch {
        let gn = &g.data[n * geom.cout * plane..(n + 1) * geom.cout * plane];
        if let Some(dw) = dw.as_mut() {
            geom.im2col(&x.data[n * in_len..(n + 1) * in_len], &mut cols);
            for co in 0..geom.cout {
                let grow = &gn[co * plane..(co + 1) * plane];
                for r in 0..k {
                    dw[co * k + r] += dot(grow, &cols[r * plane..(r + 1) * plane]);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for co in 0..geom.cout {
                db[co] += gn[co * plane..(co + 1) * plane]
                    .iter()
                    .map(|v| v.wide())
                    .sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(T::zero());
            for co in 0..geom.cout {
                let grow = &gn[co * plane..(co + 1) * plane];
                for r in 0..k {
                    let wv = w.data[co * k + r];
                    if wv != T::zero() {
                        axpy(wv, grow, &mut dcols[r * plane..(r + 1) * plane]);
                    }
                }
            }
            geom.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }

    let mut out = vec![
        dx.map(|d| Tensor {
            shape: x.shape.clone(),
            data: d,
        }),
        dw.map(|d| Tensor {
            shape: w.shape.clone(),
            data: d,
        }),
    ];
    if let Some(b) = bias {
        out.push(db.map(|d| Tensor {
            shape: b.shape.clone(),
            data: d.into_iter().map(T::of).collect(),
        }));
    }
    out
}

fn reduce_groups<T: Real>(x: &Tensor<T>, reduce: Reduce) -> Result<(Vec<usize>, usize)> {
    match reduce {
        Reduce::All => Ok((Vec::new(), 1)),
        Reduce::PerBatch => {
            if x.shape.is_empty() {
                return Err(shape_err("reduce", "per-batch reduction of a 0-D tensor"));
            }
            Ok((vec![x.shape[0]], x.shape[0]))
        }
    }
}

fn reduce_sum<T: Real>(x: &Tensor<T>, reduce: Reduce, mean: bool) -> Result<Tensor<T>> {
    let (shape, groups) = reduce_groups(x, reduce)?;
    let per = x.numel().checked_div(groups).unwrap_or(0);
    let data = (0..groups)
        .map(|gi| {
            let s: f64 = x.data[gi * per..(gi + 1) * per].iter().map(|v| v.wide()).sum();
            T::of(if mean { s / per.max(1) as f64 } else { s })
        })
        .collect();
    Ok(Tensor { shape, data })
}

fn reduce_grad<T: Real>(x: &Tensor<T>, g: &Tensor<T>, reduce: Reduce, mean: bool) -> Tensor<T> {
    let groups = match reduce {
        Reduce::All => 1,
        Reduce::PerBatch => x.shape[0],
    };
    let per = x.numel().checked_div(groups).unwrap_or(0);
    let mut data = Vec::with_capacity(x.numel());
    for gi in 0..groups {
        let v = if mean {
            T::of(g.data[gi].wide() / per.max(1) as f64)
        } else {
            g.data[gi]
        };
        data.extend(std::iter::repeat_n(v, per));
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

fn pad2d<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    if x.shape.len() < 2 {
        return Err(shape_err("pad", format!("need at least 2-D input, got {:?}", x.shape)));
    }
    let r = x.shape.len();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let planes = x.numel() / (h * w).max(1);
    let mut data = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x.data[(p * h + y) * w..(p * h + y + 1) * w];
            let start = (p * ph + y + pad) * pw + pad;
            data[start..start + w].copy_from_slice(src);
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = ph;
    shape[r - 1] = pw;
    Ok(Tensor { shape, data })
}

fn unpad2d<T: Real>(shape: &[usize], g: &Tensor<T>, pad: usize) -> Tensor<T> {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    let planes: usize = shape[..r - 2].iter().product();
    let mut data = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let start = (p * ph + y + pad) * pw + pad;
            data.extend_from_slice(&g.data[start..start + w]);
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}
