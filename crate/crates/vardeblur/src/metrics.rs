//! PSNR, SSIM, and flow end-point-error metrics.

use crate::error::{Error, Result};
use crate::grid::{FlowField, Image, Mask};

/// Identical images report this instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

/// 10 log10(1 / MSE) over all channels, unit dynamic range.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch {
            context: "psnr",
            a_w: a.width(),
            a_h: a.height(),
            b_w: b.width(),
            b_h: b.height(),
        });
    }
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean local SSIM on luminance: 11x11 Gaussian window (sigma 1.5),
/// C1 = 0.01^2, C2 = 0.03^2, evaluated where the full window fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch {
            context: "ssim",
            a_w: a.width(),
            a_h: a.height(),
            b_w: b.width(),
            b_h: b.height(),
        });
    }
    let w = a.width();
    let h = a.height();
    if w < 11 || h < 11 {
        return Err(Error::InvalidParam(format!(
            "ssim needs min dimension 11, got {w}x{h}"
        )));
    }
    let la = a.luminance();
    let lb = b.luminance();

    let radius = 5i64;
    let sigma = 1.5;
    let mut win = Vec::with_capacity(121);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            win.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let wsum: f64 = win.iter().sum();
    for v in &mut win {
        *v /= wsum;
    }

    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut acc = 0.0;
    let mut count = 0usize;
    for cy in radius..h as i64 - radius {
        for cx in radius..w as i64 - radius {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            let mut k = 0;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let p = ((cy + dy) as usize) * w + (cx + dx) as usize;
                    let va = la.data()[p];
                    let vb = lb.data()[p];
                    let wt = win[k];
                    mu_a += wt * va;
                    mu_b += wt * vb;
                    aa += wt * va * va;
                    bb += wt * vb * vb;
                    ab += wt * va * vb;
                    k += 1;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Mean Euclidean end-point error over (optionally masked) pixels.
pub fn epe(flow: &FlowField, gt: &FlowField, mask: Option<&Mask>) -> Result<f64> {
    if flow.width() != gt.width() || flow.height() != gt.height() {
        return Err(Error::DimensionMismatch {
            context: "epe",
            a_w: flow.width(),
            a_h: flow.height(),
            b_w: gt.width(),
            b_h: gt.height(),
        });
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..flow.u.len() {
        if let Some(m) = mask {
            if !m.data[i] {
                continue;
            }
        }
        let du = flow.u[i] - gt.u[i];
        let dv = flow.v[i] - gt.v[i];
        acc += (du * du + dv * dv).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyInput("epe: empty mask"));
    }
    Ok(acc / count as f64)
}
