use sat_refine::imageops::{rotate_sprite, Sprite};

/// Bilinear inverse mapping written as a tent filter over source pixel
/// centres.
fn oracle_one_hot(w: usize, h: usize, hot: (usize, usize), colour: [f32; 3], angle_deg: f64) -> (usize, usize, Vec<f64>, Vec<[f64; 3]>) {
    let t = angle_deg.to_radians();
    let (s, c) = t.sin_cos();
    let ow = ((w as f64) * c.abs() + (h as f64) * s.abs()).ceil() as usize;
    let oh = ((w as f64) * s.abs() + (h as f64) * c.abs()).ceil() as usize;
    let mut alpha = Vec::new();
    let mut rgb = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            // offset of this output pixel centre from the canvas centre
            let dx = ox as f64 + 0.5 - ow as f64 / 2.0;
            let dy = oy as f64 + 0.5 - oh as f64 / 2.0;
            // rotate back by -angle, then into source pixel-centre coordinates
            let sx = c * dx + s * dy + w as f64 / 2.0 - 0.5;
            let sy = -s * dx + c * dy + h as f64 / 2.0 - 0.5;
            let tent = |d: f64| (1.0 - d.abs()).max(0.0);
            let a = tent(sx - hot.0 as f64) * tent(sy - hot.1 as f64);
            alpha.push(a);
            rgb.push(if a > 0.0 { colour.map(f64::from) } else { [0.0; 3] });
        }
    }
    (ow, oh, alpha, rgb)
}

#[test]
fn one_hot_45_degrees_matches_oracle() {
    let colour = [0.9, 0.4, 0.1];
    for hot in [(1, 1), (0, 0), (2, 1), (0, 2)] {
        let mut rgb = vec![0.0f32; 27];
        let mut alpha = vec![0.0f32; 9];
        let i = hot.1 * 3 + hot.0;
        alpha[i] = 1.0;
        rgb[i * 3..i * 3 + 3].copy_from_slice(&colour);
        let sprite = Sprite::new(3, 3, rgb, alpha).unwrap();
        let out = rotate_sprite(&sprite, 45.0);
        let (ow, oh, oa, orgb) = oracle_one_hot(3, 3, hot, colour, 45.0);
        assert_eq!((out.width(), out.height()), (ow, oh));
        for k in 0..ow * oh {
            assert!((out.alpha()[k] as f64 - oa[k]).abs() < 1e-6, "alpha {k} hot {hot:?}");
            for ch in 0..3 {
                assert!((out.rgb()[k * 3 + ch] as f64 - orgb[k][ch]).abs() < 1e-6, "rgb {k}.{ch} hot {hot:?}");
            }
        }
    }
}

#[test]
fn one_hot_other_angles_match_oracle() {
    for angle in [10.0, 30.0, 135.0, 200.0, 333.0] {
        let mut rgb = vec![0.0f32; 5 * 4 * 3];
        let mut alpha = vec![0.0f32; 20];
        alpha[7] = 1.0;
        rgb[21..24].copy_from_slice(&[0.2, 0.6, 1.0]);
        let out = rotate_sprite(&Sprite::new(5, 4, rgb, alpha).unwrap(), angle);
        let (ow, oh, oa, _) = oracle_one_hot(5, 4, (2, 1), [0.2, 0.6, 1.0], angle);
        assert_eq!((out.width(), out.height()), (ow, oh), "angle {angle}");
        for k in 0..ow * oh {
            assert!((out.alpha()[k] as f64 - oa[k]).abs() < 1e-6, "angle {angle} pixel {k}");
        }
    }
}
