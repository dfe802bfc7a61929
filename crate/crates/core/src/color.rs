//! sRGB to CIELAB conversion and the CIEDE2000 colour difference.
//!
//! Conversion chain: sRGB in [0,1] -> linear RGB (IEC 61966-2-1 EOTF) ->
//! CIE XYZ (D65 white, 2 degree observer) -> CIELAB. The difference formula
//! includes the lightness/chroma/hue weighting functions and the rotation
//! term, with kL = kC = kH = 1.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// CIELAB coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

/// D65 reference white, 2 degree observer.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_eotf(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Convert one sRGB pixel (components in [0,1]) to CIELAB.
pub fn srgb_to_lab(r: f64, g: f64, b: f64) -> Lab {
    let (rl, gl, bl) = (srgb_eotf(r), srgb_eotf(g), srgb_eotf(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// CIEDE2000 colour difference between two Lab values.
///
/// This Lab-level entry point exists so the published verification pairs can
/// be checked directly.
pub fn ciede2000_lab(p: Lab, q: Lab) -> f64 {
    const POW25_7: f64 = 6103515625.0; // 25^7

    let c1 = (p.a * p.a + p.b * p.b).sqrt();
    let c2 = (q.a * q.a + q.b * q.b).sqrt();
    let cbar = 0.5 * (c1 + c2);
    let cbar7 = cbar.powi(7);
    let g = 0.5 * (1.0 - (cbar7 / (cbar7 + POW25_7)).sqrt());

    let a1p = (1.0 + g) * p.a;
    let a2p = (1.0 + g) * q.a;
    let c1p = (a1p * a1p + p.b * p.b).sqrt();
    let c2p = (a2p * a2p + q.b * q.b).sqrt();

    let h1p = hue_deg(p.b, a1p);
    let h2p = hue_deg(q.b, a2p);

    let dl = q.l - p.l;
    let dc = c2p - c1p;

    let dh_deg = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d.abs() <= 180.0 {
            d
        } else if d > 180.0 {
            d - 360.0
        } else {
            d + 360.0
        }
    };
    let dh = 2.0 * (c1p * c2p).sqrt() * (dh_deg.to_radians() / 2.0).sin();

    let lbar = 0.5 * (p.l + q.l);
    let cbarp = 0.5 * (c1p + c2p);
    let hbar = if c1p * c2p == 0.0 {
        h1p + h2p
    } else {
        let sum = h1p + h2p;
        if (h1p - h2p).abs() <= 180.0 {
            0.5 * sum
        } else if sum < 360.0 {
            0.5 * (sum + 360.0)
        } else {
            0.5 * (sum - 360.0)
        }
    };

    let t = 1.0 - 0.17 * (hbar - 30.0).to_radians().cos() + 0.24 * (2.0 * hbar).to_radians().cos()
        + 0.32 * (3.0 * hbar + 6.0).to_radians().cos()
        - 0.20 * (4.0 * hbar - 63.0).to_radians().cos();

    let dtheta = 30.0 * (-((hbar - 275.0) / 25.0).powi(2)).exp();
    let cbarp7 = cbarp.powi(7);
    let rc = 2.0 * (cbarp7 / (cbarp7 + POW25_7)).sqrt();
    let rt = -(2.0 * dtheta).to_radians().sin() * rc;

    let lm50 = lbar - 50.0;
    let sl = 1.0 + 0.015 * lm50 * lm50 / (20.0 + lm50 * lm50).sqrt();
    let sc = 1.0 + 0.045 * cbarp;
    let sh = 1.0 + 0.015 * cbarp * t;

    let tl = dl / sl;
    let tc = dc / sc;
    let th = dh / sh;
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

fn hue_deg(b: f64, ap: f64) -> f64 {
    if b == 0.0 && ap == 0.0 {
        0.0
    } else {
        let h = b.atan2(ap).to_degrees();
        if h < 0.0 {
            h + 360.0
        } else {
            h
        }
    }
}

fn rgb_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [3, h, w] => Ok((3, *h, *w)),
        [1, 3, h, w] => Ok((3, *h, *w)),
        other => Err(Error::invalid(op, format!("expected [3,H,W] or [1,3,H,W] sRGB image, got {other:?}"))),
    }
}

/// Mean CIEDE2000 over all pixels of two sRGB images in [0,1].
pub fn ciede2000_mean<T: Scalar>(gt: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    let (_, h, w) = rgb_dims(gt, "ciede2000")?;
    let (_, h2, w2) = rgb_dims(pred, "ciede2000")?;
    if (h, w) != (h2, w2) {
        return Err(Error::shape("ciede2000", gt.shape(), pred.shape(), "image extents must agree"));
    }
    for t in [gt, pred] {
        if t.min_value().wide() < 0.0 || t.max_value().wide() > 1.0 {
            return Err(Error::invalid("ciede2000", "sRGB values must lie in [0,1]"));
        }
    }
    let hw = h * w;
    let offset_gt = gt.numel() - 3 * hw; // skip leading batch axis if present
    let offset_pred = pred.numel() - 3 * hw;
    let gd = &gt.data()[offset_gt..];
    let pd = &pred.data()[offset_pred..];
    let mut acc = 0.0f64;
    for i in 0..hw {
        let a = srgb_to_lab(gd[i].wide(), gd[hw + i].wide(), gd[2 * hw + i].wide());
        let b = srgb_to_lab(pd[i].wide(), pd[hw + i].wide(), pd[2 * hw + i].wide());
        acc += ciede2000_lab(a, b);
    }
    Ok(acc / hw as f64)
}

/// The published CIEDE2000 verification pairs:
/// `(L1, a1, b1, L2, a2, b2, expected dE00)`.
pub const CIEDE2000_VERIFICATION_PAIRS: [(f64, f64, f64, f64, f64, f64, f64); 34] = [
    (50.0000, 2.6772, -79.7751, 50.0000, 0.0000, -82.7485, 2.0425),
    (50.0000, 3.1571, -77.2803, 50.0000, 0.0000, -82.7485, 2.8615),
    (50.0000, 2.8361, -74.0200, 50.0000, 0.0000, -82.7485, 3.4412),
    (50.0000, -1.3802, -84.2814, 50.0000, 0.0000, -82.7485, 1.0000),
    (50.0000, -1.1848, -84.8006, 50.0000, 0.0000, -82.7485, 1.0000),
    (50.0000, -0.9009, -85.5211, 50.0000, 0.0000, -82.7485, 1.0000),
    (50.0000, 0.0000, 0.0000, 50.0000, -1.0000, 2.0000, 2.3669),
    (50.0000, -1.0000, 2.0000, 50.0000, 0.0000, 0.0000, 2.3669),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0009, 7.1792),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0010, 7.1792),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0011, 7.2195),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0012, 7.2195),
    (50.0000, -0.0010, 2.4900, 50.0000, 0.0009, -2.4900, 4.8045),
    (50.0000, -0.0010, 2.4900, 50.0000, 0.0010, -2.4900, 4.8045),
    (50.0000, -0.0010, 2.4900, 50.0000, 0.0011, -2.4900, 4.7461),
    (50.0000, 2.5000, 0.0000, 50.0000, 0.0000, -2.5000, 4.3065),
    (50.0000, 2.5000, 0.0000, 73.0000, 25.0000, -18.0000, 27.1492),
    (50.0000, 2.5000, 0.0000, 61.0000, -5.0000, 29.0000, 22.8977),
    (50.0000, 2.5000, 0.0000, 56.0000, -27.0000, -3.0000, 31.9030),
    (50.0000, 2.5000, 0.0000, 58.0000, 24.0000, 15.0000, 19.4535),
    (50.0000, 2.5000, 0.0000, 50.0000, 3.1736, 0.5854, 1.0000),
    (50.0000, 2.5000, 0.0000, 50.0000, 3.2972, 0.0000, 1.0000),
    (50.0000, 2.5000, 0.0000, 50.0000, 1.8634, 0.5757, 1.0000),
    (50.0000, 2.5000, 0.0000, 50.0000, 3.2592, 0.3350, 1.0000),
    (60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644),
    (63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630),
    (61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731),
    (35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645),
    (22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373),
    (36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146),
    (90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441),
    (90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381),
    (6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377),
    (2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verification_pairs_match_to_1e4() {
        for (i, &(l1, a1, b1, l2, a2, b2, expected)) in CIEDE2000_VERIFICATION_PAIRS.iter().enumerate() {
            let got = ciede2000_lab(Lab { l: l1, a: a1, b: b1 }, Lab { l: l2, a: a2, b: b2 });
            assert!(
                (got - expected).abs() < 1e-4,
                "pair {}: got {got:.6}, expected {expected:.4}",
                i + 1
            );
        }
    }

    #[test]
    fn formula_is_symmetric() {
        for &(l1, a1, b1, l2, a2, b2, _) in CIEDE2000_VERIFICATION_PAIRS.iter() {
            let p = Lab { l: l1, a: a1, b: b1 };
            let q = Lab { l: l2, a: a2, b: b2 };
            assert!((ciede2000_lab(p, q) - ciede2000_lab(q, p)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_images_have_zero_difference() {
        let img = Tensor::<f64>::new(vec![3, 2, 2], vec![0.2; 12]).unwrap();
        assert_eq!(ciede2000_mean(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn white_maps_to_l100() {
        let lab = srgb_to_lab(1.0, 1.0, 1.0);
        assert!((lab.l - 100.0).abs() < 1e-3, "white L* = {}", lab.l);
        assert!(lab.a.abs() < 1e-2 && lab.b.abs() < 1e-2);
    }

    #[test]
    fn rejects_out_of_range_values() {
        let ok = Tensor::<f64>::new(vec![3, 1, 1], vec![0.5, 0.5, 0.5]).unwrap();
        let bad = Tensor::<f64>::new(vec![3, 1, 1], vec![0.5, 1.5, 0.5]).unwrap();
        assert!(ciede2000_mean(&ok, &bad).is_err());
    }
}
