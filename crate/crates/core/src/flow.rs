//! Optical-flow providers and flow composition.
//!
//! No learned flow estimator lives here: flows come from a zero provider, a
//! synthetic ground-truth generator, or raw tensor files. Flows use the
//! backward-warping convention throughout: a flow field lives on the target
//! frame's grid and points to the sampling location in the source frame,
//! stored as `(dy, dx)` in pixels at feature resolution.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::kernel;
use crate::tensor::{Scalar, Tensor};

/// Which way information propagates through the video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Later clips are targets; sources lie earlier in time.
    Forward,
    /// Earlier clips are targets; sources lie later in time.
    Backward,
}

/// All pairwise flows between two adjacent clips: shape `[N, N, H, W, 2]`,
/// indexed `(target frame n, source frame n')`.
#[derive(Debug, Clone)]
pub struct PairwiseFlow<T: Scalar> {
    data: Tensor<T>,
}

impl<T: Scalar> PairwiseFlow<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 5 || s[0] != s[1] || s[4] != 2 {
            return Err(Error::shape(format!("pairwise flow must be [N, N, H, W, 2], got {s:?}")));
        }
        Ok(PairwiseFlow { data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        PairwiseFlow { data: Tensor::zeros(vec![n, n, h, w, 2]) }
    }

    pub fn n(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// The `[H, W, 2]` field for one (target, source) frame pair.
    pub fn field(&self, target: usize, source: usize) -> Tensor<T> {
        let (n, h, w) = (self.n(), self.height(), self.width());
        assert!(target < n && source < n);
        let sz = h * w * 2;
        let base = (target * n + source) * sz;
        Tensor::new(vec![h, w, 2], self.data.data()[base..base + sz].to_vec())
    }
}

/// Source of frame-consecutive optical flows for a `T`-frame video.
#[derive(Debug, Clone)]
pub enum FlowProvider {
    /// All-zero flows.
    Zero { frames: usize, height: usize, width: usize },
    /// Exact flows for a synthetic video translating by `motion[t]`
    /// (content displacement from frame t to t+1, feature-resolution pixels).
    SyntheticGt { motion: Vec<(f64, f64)>, height: usize, width: usize },
    /// Flows loaded from raw tensor files, one `[T-1, H, W, 2]` per direction.
    File { forward: Tensor<f64>, backward: Tensor<f64> },
}

impl FlowProvider {
    pub fn from_files(forward: &Path, backward: &Path) -> Result<Self> {
        let f: Tensor<f64> = io::read_tensor(forward)?;
        let b: Tensor<f64> = io::read_tensor(backward)?;
        for (t, which) in [(&f, "forward"), (&b, "backward")] {
            let s = t.shape();
            if s.len() != 4 || s[3] != 2 {
                return Err(Error::shape(format!("{which} flow file must be [T-1, H, W, 2], got {s:?}")));
            }
        }
        if f.shape() != b.shape() {
            return Err(Error::shape(format!(
                "flow file shapes differ: {:?} vs {:?}",
                f.shape(),
                b.shape()
            )));
        }
        Ok(FlowProvider::File { forward: f, backward: b })
    }

    pub fn frames(&self) -> usize {
        match self {
            FlowProvider::Zero { frames, .. } => *frames,
            FlowProvider::SyntheticGt { motion, .. } => motion.len() + 1,
            FlowProvider::File { forward, .. } => forward.shape()[0] + 1,
        }
    }

    /// Frame-consecutive flows for one direction, shape `[T-1, H, W, 2]`.
    ///
    /// Entry `t` of the forward direction lives on frame `t+1` and samples
    /// frame `t`; entry `t` of the backward direction lives on frame `t`
    /// and samples frame `t+1`.
    pub fn consecutive_flows<T: Scalar>(&self, dir: Direction) -> Result<Tensor<T>> {
        match self {
            FlowProvider::Zero { frames, height, width } => {
                if *frames < 2 {
                    return Err(Error::Invalid("need at least 2 frames for flows".into()));
                }
                Ok(Tensor::zeros(vec![frames - 1, *height, *width, 2]))
            }
            FlowProvider::SyntheticGt { motion, height, width } => {
                let steps = motion.len();
                let mut data = Vec::with_capacity(steps * height * width * 2);
                for &(dy, dx) in motion {
                    // Content moves by +d from t to t+1, so the target
                    // samples the source at -d (forward) or +d (backward).
                    let (fy, fx) = match dir {
                        Direction::Forward => (-dy, -dx),
                        Direction::Backward => (dy, dx),
                    };
                    for _ in 0..height * width {
                        data.push(T::from_f64(fy));
                        data.push(T::from_f64(fx));
                    }
                }
                Ok(Tensor::new(vec![steps, *height, *width, 2], data))
            }
            FlowProvider::File { forward, backward } => {
                let src = match dir {
                    Direction::Forward => forward,
                    Direction::Backward => backward,
                };
                Ok(Tensor::new(
                    src.shape().to_vec(),
                    src.data().iter().map(|&v| T::from_f64(v)).collect(),
                ))
            }
        }
    }
}

/// Chain two backward-warp flows: `f_ab` samples frame a onto frame b,
/// `f_bc` samples frame b onto frame c; the result samples a onto c:
/// `f_ac(x) = f_bc(x) + f_ab(x + f_bc(x))`.
pub fn compose_flows<T: Scalar>(f_ab: &Tensor<T>, f_bc: &Tensor<T>) -> Result<Tensor<T>> {
    if f_ab.shape() != f_bc.shape() {
        return Err(Error::shape(format!(
            "compose_flows shapes differ: {:?} vs {:?}",
            f_ab.shape(),
            f_bc.shape()
        )));
    }
    let warped = kernel::flow_warp(f_ab, f_bc)?;
    let data = f_bc.data().iter().zip(warped.data()).map(|(&a, &b)| a + b).collect();
    Ok(Tensor::new(f_bc.shape().to_vec(), data))
}

/// Pairwise flows between clip `clip_index` (targets) and its neighbour in
/// `dir` (sources), composed hop by hop from frame-consecutive flows.
///
/// Entry `(n, n')` chains `|global target - global source|` consecutive
/// flows. `consecutive` must come from [`FlowProvider::consecutive_flows`]
/// for the same direction.
pub fn clip_pairwise_flows<T: Scalar>(
    consecutive: &Tensor<T>,
    clip_size: usize,
    clip_index: usize,
    dir: Direction,
) -> Result<PairwiseFlow<T>> {
    let s = consecutive.shape();
    if s.len() != 4 || s[3] != 2 {
        return Err(Error::shape(format!("consecutive flows must be [T-1, H, W, 2], got {s:?}")));
    }
    let (steps, h, w) = (s[0], s[1], s[2]);
    let frames = steps + 1;
    let n = clip_size;
    let field = |t: usize| -> Tensor<T> {
        let sz = h * w * 2;
        Tensor::new(vec![h, w, 2], consecutive.data()[t * sz..(t + 1) * sz].to_vec())
    };

    let mut out = Vec::with_capacity(n * n * h * w * 2);
    for tn in 0..n {
        let target = clip_index * n + tn;
        for sn in 0..n {
            let (source, ok) = match dir {
                Direction::Forward => {
                    if clip_index == 0 {
                        return Err(Error::Invalid("clip 0 has no forward predecessor".into()));
                    }
                    ((clip_index - 1) * n + sn, target < frames)
                }
                Direction::Backward => ((clip_index + 1) * n + sn, (clip_index + 1) * n + sn < frames),
            };
            if !ok || target >= frames || source >= frames {
                return Err(Error::Invalid(format!(
                    "frame pair ({target}, {source}) out of range for {frames} frames"
                )));
            }
            let flow = match dir {
                Direction::Forward => {
                    // target > source: chain flows target-1, ..., source.
                    let mut acc = field(target - 1);
                    for k in (source..target - 1).rev() {
                        acc = compose_flows(&field(k), &acc)?;
                    }
                    acc
                }
                Direction::Backward => {
                    // source > target: chain flows target, ..., source-1.
                    let mut acc = field(target);
                    for k in target + 1..source {
                        acc = compose_flows(&field(k), &acc)?;
                    }
                    acc
                }
            };
            out.extend_from_slice(flow.data());
        }
    }
    PairwiseFlow::new(Tensor::new(vec![n, n, h, w, 2], out))
}

/// Reduce an input-resolution flow field to feature resolution for the
/// s = 1 tasks: 4x4 average pooling with the values scaled by 1/4.
pub fn downscale_flow_4x<T: Scalar>(flow: &Tensor<T>) -> Result<Tensor<T>> {
    let s = flow.shape();
    if s.len() != 3 || s[2] != 2 || s[0] % 4 != 0 || s[1] % 4 != 0 {
        return Err(Error::shape(format!(
            "downscale_flow_4x needs [4k, 4m, 2], got {s:?}"
        )));
    }
    let (h, w) = (s[0] / 4, s[1] / 4);
    let quarter = T::from_f64(0.25 * (1.0 / 16.0));
    let mut out = vec![T::zero(); h * w * 2];
    for y in 0..h {
        for x in 0..w {
            for c in 0..2 {
                let mut acc = T::zero();
                for iy in 0..4 {
                    for ix in 0..4 {
                        acc = acc + flow.data()[((y * 4 + iy) * s[1] + x * 4 + ix) * 2 + c];
                    }
                }
                out[(y * w + x) * 2 + c] = acc * quarter;
            }
        }
    }
    Ok(Tensor::new(vec![h, w, 2], out))
}
