//! Coarse-to-fine image pyramid shared by the solvers.

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, resample_image, Image};

/// The smallest dimension a pyramid level may have; coarser levels are
/// dropped to keep blur kernels non-degenerate.
pub const MIN_LEVEL_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub images: Vec<Image>,
    /// Nominal scale relative to full resolution (scale^k).
    pub scale: f64,
    pub width: usize,
    pub height: usize,
}

/// Levels ordered coarse to fine; the finest level is the input unchanged.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &PyramidLevel {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Build a Gaussian pyramid. Each coarser level prefilters the previous one
/// with std 0.5/scale and resamples bilinearly; dimensions follow
/// round(prev * scale). Levels whose min dimension would drop below
/// [`MIN_LEVEL_DIM`] are dropped.
pub fn build_pyramid(frames: &[Image], num_levels: usize, scale: f64) -> Result<Pyramid> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("build_pyramid: no frames"));
    }
    if num_levels < 1 {
        return Err(Error::InvalidParam("num_levels must be >= 1".into()));
    }
    if !(scale > 0.0 && scale < 1.0) {
        return Err(Error::InvalidParam(format!(
            "scale must be in (0,1), got {scale}"
        )));
    }
    let w0 = frames[0].width();
    let h0 = frames[0].height();
    for f in frames {
        if f.width() != w0 || f.height() != h0 {
            return Err(Error::DimensionMismatch {
                context: "build_pyramid frames",
                a_w: w0,
                a_h: h0,
                b_w: f.width(),
                b_h: f.height(),
            });
        }
    }

    let prefilter_sigma = 0.5 / scale;
    let mut fine_to_coarse: Vec<PyramidLevel> = vec![PyramidLevel {
        images: frames.to_vec(),
        scale: 1.0,
        width: w0,
        height: h0,
    }];
    for k in 1..num_levels {
        let prev = fine_to_coarse.last().unwrap();
        let nw = (prev.width as f64 * scale).round() as usize;
        let nh = (prev.height as f64 * scale).round() as usize;
        if nw.min(nh) < MIN_LEVEL_DIM {
            break;
        }
        let images = prev
            .images
            .iter()
            .map(|img| resample_image(&gaussian_blur(img, prefilter_sigma), nw, nh))
            .collect();
        fine_to_coarse.push(PyramidLevel {
            images,
            scale: scale.powi(k as i32),
            width: nw,
            height: nh,
        });
    }
    fine_to_coarse.reverse();
    Ok(Pyramid {
        levels: fine_to_coarse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant_through_levels() {
        let frames = vec![Image::filled(64, 48, 1, 0.5)];
        let pyr = build_pyramid(&frames, 3, 0.9).unwrap();
        assert_eq!(pyr.num_levels(), 3);
        for level in &pyr.levels {
            for img in &level.images {
                for v in img.data() {
                    assert!((v - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hd_17_levels_reaches_expected_coarsest_dims() {
        // Dimensions follow iterated rounding, not round(w * scale^k).
        let mut w = 1280usize;
        let mut h = 720usize;
        for _ in 1..17 {
            w = (w as f64 * 0.9).round() as usize;
            h = (h as f64 * 0.9).round() as usize;
        }
        assert_eq!((w, h), (238, 134));

        let frames = vec![Image::new(1280, 720, 1)];
        let pyr = build_pyramid(&frames, 17, 0.9).unwrap();
        assert_eq!(pyr.num_levels(), 17);
        let coarsest = &pyr.levels[0];
        assert_eq!((coarsest.width, coarsest.height), (238, 134));
    }

    #[test]
    fn single_level_pyramid_is_input() {
        let frames = vec![Image::from_fn(20, 20, |x, y| ((x + y) % 3) as f64 / 3.0)];
        let pyr = build_pyramid(&frames, 1, 0.9).unwrap();
        assert_eq!(pyr.num_levels(), 1);
        assert_eq!(pyr.levels[0].images[0], frames[0]);
    }

    #[test]
    fn finest_level_is_bit_equal_to_input() {
        let frames = vec![Image::from_fn(33, 21, |x, y| {
            ((x * 7 + y * 3) % 13) as f64 / 13.0
        })];
        let pyr = build_pyramid(&frames, 5, 0.9).unwrap();
        assert_eq!(pyr.finest().images[0], frames[0]);
    }

    #[test]
    fn small_levels_are_dropped() {
        let frames = vec![Image::new(32, 32, 1)];
        let pyr = build_pyramid(&frames, 30, 0.5).unwrap();
        // 32 -> 16 -> (8 would violate the min dim, dropped)
        assert_eq!(pyr.num_levels(), 2);
        assert_eq!(pyr.levels[0].width, 16);
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(build_pyramid(&[], 3, 0.9).is_err());
        let frames = vec![Image::new(10, 10, 1), Image::new(11, 10, 1)];
        assert!(build_pyramid(&frames, 3, 0.9).is_err());
    }
}
