//! Per-frame bundle threaded through the pyramid levels, plus the flow
//! chaining and kernel-flow plumbing shared by the energy and the solvers.

use crate::error::{Error, Result};
use crate::grid::{chain_flows, FlowField, Image, Mask, SigmaMap};
use crate::ops::BlurChain;

#[derive(Debug, Clone)]
pub struct FrameState {
    pub b: Image,
    pub l: Image,
    /// Flow to the next frame (absent on the last frame).
    pub u_fwd: Option<FlowField>,
    /// Flow to the previous frame (absent on the first frame).
    pub u_bwd: Option<FlowField>,
    pub sigma: SigmaMap,
    pub tau: f64,
    pub occ_fwd: Option<Image>,
    pub occ_bwd: Option<Image>,
}

#[derive(Debug, Clone)]
pub struct SequenceState {
    pub frames: Vec<FrameState>,
    pub enable_defocus: bool,
}

impl SequenceState {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].b.width(), self.frames[0].b.height())
    }

    /// The flows feeding the blur kernel of frame i. A missing directional
    /// flow at a sequence boundary is mirrored from the opposite one, since
    /// the exposure streak exists on both sides regardless of neighbor
    /// availability (constant-velocity assumption).
    pub fn kernel_flows(&self, i: usize) -> (FlowField, FlowField) {
        let f = &self.frames[i];
        match (&f.u_fwd, &f.u_bwd) {
            (Some(fw), Some(bw)) => (fw.clone(), bw.clone()),
            (Some(fw), None) => (fw.clone(), fw.negated()),
            (None, Some(bw)) => (bw.negated(), bw.clone()),
            (None, None) => {
                let (w, h) = self.dims();
                (FlowField::new(w, h), FlowField::new(w, h))
            }
        }
    }

    /// Flow from frame i to frame i+n (n != 0), chained from the stored
    /// unit-step flows; the mask records where every chaining hop stayed
    /// inside the image.
    pub fn flow_to_neighbor(&self, i: usize, n: i32) -> Option<(FlowField, Mask)> {
        if n == 0 {
            return None;
        }
        let target = i as i32 + n;
        if target < 0 || target as usize >= self.num_frames() {
            return None;
        }
        let (w, h) = self.dims();
        let step = |idx: usize| -> Option<&FlowField> {
            if n > 0 {
                self.frames[idx].u_fwd.as_ref()
            } else {
                self.frames[idx].u_bwd.as_ref()
            }
        };
        let mut flow = step(i)?.clone();
        let mut mask = Mask::all_valid(w, h);
        let mut cur = i as i32;
        for _ in 1..n.abs() {
            cur += n.signum();
            let next = step(cur as usize)?;
            let (chained, m) = chain_flows(&flow, next).ok()?;
            flow = chained;
            mask = mask.intersect(&m);
        }
        Some((flow, mask))
    }

    /// Build the per-frame K*G operators from the current flows and sigmas.
    pub fn build_blur_ops(&self) -> Result<Vec<BlurChain>> {
        (0..self.num_frames())
            .map(|i| {
                let (fwd, bwd) = self.kernel_flows(i);
                let sigma = if self.enable_defocus {
                    Some(&self.frames[i].sigma)
                } else {
                    None
                };
                BlurChain::build(&fwd, &bwd, self.frames[i].tau, sigma)
            })
            .collect()
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            let ok = f.l.is_finite()
                && f.b.is_finite()
                && f.sigma.is_finite()
                && f.u_fwd.as_ref().map_or(true, |u| u.is_finite())
                && f.u_bwd.as_ref().map_or(true, |u| u.is_finite());
            if !ok {
                return Err(Error::NonFinite(format!("{context}, frame {i}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_state() -> SequenceState {
        let w = 8;
        let h = 8;
        let mk = |i: usize| FrameState {
            b: Image::filled(w, h, 1, 0.5),
            l: Image::filled(w, h, 1, 0.5),
            u_fwd: if i < 2 {
                Some(FlowField::uniform(w, h, 1.0, 0.0))
            } else {
                None
            },
            u_bwd: if i > 0 {
                Some(FlowField::uniform(w, h, -1.0, 0.0))
            } else {
                None
            },
            sigma: SigmaMap::uniform(w, h, 0.0),
            tau: 0.5,
            occ_fwd: None,
            occ_bwd: None,
        };
        SequenceState {
            frames: (0..3).map(mk).collect(),
            enable_defocus: false,
        }
    }

    #[test]
    fn kernel_flows_mirror_at_boundaries() {
        let st = tiny_state();
        let (fwd0, bwd0) = st.kernel_flows(0);
        assert_eq!(fwd0.at(3, 3), (1.0, 0.0));
        assert_eq!(bwd0.at(3, 3), (-1.0, 0.0));
        let (fwd2, bwd2) = st.kernel_flows(2);
        assert_eq!(bwd2.at(3, 3), (-1.0, 0.0));
        assert_eq!(fwd2.at(3, 3), (1.0, 0.0));
    }

    #[test]
    fn chained_neighbor_flow_doubles_uniform_step() {
        let st = tiny_state();
        let (flow, _) = st.flow_to_neighbor(0, 2).unwrap();
        assert_eq!(flow.at(2, 2), (2.0, 0.0));
        assert!(st.flow_to_neighbor(0, -1).is_none());
        assert!(st.flow_to_neighbor(2, 1).is_none());
        assert!(st.flow_to_neighbor(1, 0).is_none());
    }
}
