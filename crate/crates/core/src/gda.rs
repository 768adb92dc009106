//! Guided deformable attention: one-stage clip-to-clip alignment.
//!
//! For every target frame of a clip, `M` sampling locations per source frame
//! and deformable group are predicted around the optical-flow-guided
//! position; features from all `N·M` locations are fused with multi-head
//! softmax attention and a residual channel-mixing MLP. Flows are refined by
//! the mean predicted offset for the next layer.
//!
//! Everything here builds on the tape, so the same code path serves
//! inference, training, and gradient checks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::PairwiseFlow;
use crate::rng::SeedStream;
use crate::tape::{IdxCache, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// One clip's feature stack, shape `[N, H, W, C]`.
#[derive(Debug, Clone)]
pub struct ClipFeature<T: Scalar> {
    data: Tensor<T>,
    pub clip_index: usize,
    pub layer_index: usize,
}

impl<T: Scalar> ClipFeature<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("clip feature must be [N, H, W, C], got {s:?}")));
        }
        Ok(ClipFeature { data, clip_index: 0, layer_index: 0 })
    }

    pub fn with_indices(mut self, clip_index: usize, layer_index: usize) -> Self {
        self.clip_index = clip_index;
        self.layer_index = layer_index;
        self
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

/// Predicted sampling offsets, shape `[N, N, G, M, H, W, 2]` indexed
/// `(target frame, source frame, group, candidate)`.
#[derive(Debug, Clone)]
pub struct OffsetSet<T: Scalar> {
    data: Tensor<T>,
}

impl<T: Scalar> OffsetSet<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 7 || s[0] != s[1] || s[6] != 2 {
            return Err(Error::shape(format!(
                "offset set must be [N, N, G, M, H, W, 2], got {s:?}"
            )));
        }
        Ok(OffsetSet { data })
    }

    pub fn zeros(n: usize, groups: usize, candidates: usize, h: usize, w: usize) -> Self {
        OffsetSet { data: Tensor::zeros(vec![n, n, groups, candidates, h, w, 2]) }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    #[allow(clippy::too_many_arguments)]
    pub fn at(&self, tn: usize, sn: usize, g: usize, m: usize, y: usize, x: usize, c: usize) -> T {
        let s = self.data.shape();
        let idx = (((((tn * s[1] + sn) * s[2] + g) * s[3] + m) * s[4] + y) * s[5] + x) * 2 + c;
        self.data.data()[idx]
    }
}

/// Hyperparameters of one GDA unit.
#[derive(Debug, Clone)]
pub struct GdaConfig {
    pub channels: usize,
    pub groups: usize,
    pub candidates: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Query/key expansion ratio; 1 keeps the `(3+2R)C²` parameter count.
    pub expansion: f64,
    /// Offset magnitudes are clamped to this many feature pixels.
    pub max_offset: f64,
}

impl GdaConfig {
    pub fn qk_channels(&self) -> usize {
        (self.expansion * self.channels as f64).round() as usize
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.channels as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let ec = self.qk_channels();
        if (self.expansion * c as f64 - ec as f64).abs() > 1e-9 {
            return Err(Error::config(format!(
                "expansion {} times channels {c} is not an integer",
                self.expansion
            )));
        }
        if (self.mlp_ratio * c as f64 - self.mlp_hidden() as f64).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mlp ratio {} times channels {c} is not an integer",
                self.mlp_ratio
            )));
        }
        if self.candidates == 0 {
            return Err(Error::config("candidates must be >= 1"));
        }
        if self.groups == 0 || c % self.groups != 0 {
            return Err(Error::config(format!("groups {} must divide channels {c}", self.groups)));
        }
        if self.heads == 0 || ec % self.heads != 0 || c % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide qk channels {ec} and channels {c}",
                self.heads
            )));
        }
        if self.heads % self.groups != 0 {
            return Err(Error::config(format!(
                "heads {} must be a multiple of groups {}",
                self.heads, self.groups
            )));
        }
        if self.max_offset <= 0.0 {
            return Err(Error::config("max_offset must be positive"));
        }
        Ok(())
    }

    pub fn offset_net_in_channels(&self, clip_size: usize) -> usize {
        self.channels + clip_size * self.channels + 2 * clip_size
    }

    pub fn offset_net_out_channels(&self, clip_size: usize) -> usize {
        clip_size * self.groups * self.candidates * 2
    }
}

/// Parameter tensors of one GDA unit. Projections and the MLP are
/// bias-free; the offset net convolutions carry biases.
#[derive(Debug, Clone)]
pub struct GdaWeights<T: Scalar> {
    pub p_q: Tensor<T>,
    pub p_k: Tensor<T>,
    pub p_v: Tensor<T>,
    pub off_w1: Tensor<T>,
    pub off_b1: Tensor<T>,
    pub off_w2: Tensor<T>,
    pub off_b2: Tensor<T>,
    pub off_w3: Tensor<T>,
    pub off_b3: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
}

impl<T: Scalar> GdaWeights<T> {
    /// Offset net: three 3x3 convolutions with ReLU between, hidden width C.
    /// The output layer starts at exactly zero so the first forward pass is
    /// pure flow guidance.
    pub fn init(cfg: &GdaConfig, clip_size: usize, rng: &mut SeedStream) -> Self {
        let c = cfg.channels;
        let ec = cfg.qk_channels();
        let hid = cfg.mlp_hidden();
        let in_ch = cfg.offset_net_in_channels(clip_size);
        let out_ch = cfg.offset_net_out_channels(clip_size);
        let std = 0.02;
        GdaWeights {
            p_q: rng.trunc_normal_tensor(vec![c, ec], std),
            p_k: rng.trunc_normal_tensor(vec![c, ec], std),
            p_v: rng.trunc_normal_tensor(vec![c, c], std),
            off_w1: rng.trunc_normal_tensor(vec![3, 3, in_ch, c], std),
            off_b1: Tensor::zeros(vec![c]),
            off_w2: rng.trunc_normal_tensor(vec![3, 3, c, c], std),
            off_b2: Tensor::zeros(vec![c]),
            off_w3: Tensor::zeros(vec![3, 3, c, out_ch]),
            off_b3: Tensor::zeros(vec![out_ch]),
            mlp_w1: rng.trunc_normal_tensor(vec![c, hid], std),
            mlp_w2: rng.trunc_normal_tensor(vec![hid, c], std),
        }
    }

    /// Identity projections, zeroed MLP and offset net: the configuration
    /// under which alignment reduces to flow warping.
    pub fn warp_identity(cfg: &GdaConfig, clip_size: usize) -> Self {
        let c = cfg.channels;
        assert_eq!(cfg.qk_channels(), c, "identity projections need expansion 1");
        let eye = |k: usize| {
            let mut t = Tensor::zeros(vec![k, k]);
            for i in 0..k {
                t.data_mut()[i * k + i] = T::one();
            }
            t
        };
        let hid = cfg.mlp_hidden();
        let in_ch = cfg.offset_net_in_channels(clip_size);
        let out_ch = cfg.offset_net_out_channels(clip_size);
        GdaWeights {
            p_q: eye(c),
            p_k: eye(c),
            p_v: eye(c),
            off_w1: Tensor::zeros(vec![3, 3, in_ch, c]),
            off_b1: Tensor::zeros(vec![c]),
            off_w2: Tensor::zeros(vec![3, 3, c, c]),
            off_b2: Tensor::zeros(vec![c]),
            off_w3: Tensor::zeros(vec![3, 3, c, out_ch]),
            off_b3: Tensor::zeros(vec![out_ch]),
            mlp_w1: Tensor::zeros(vec![c, hid]),
            mlp_w2: Tensor::zeros(vec![hid, c]),
        }
    }

    /// Named parameter list in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("p_q", &self.p_q),
            ("p_k", &self.p_k),
            ("p_v", &self.p_v),
            ("offset_net.conv1.weight", &self.off_w1),
            ("offset_net.conv1.bias", &self.off_b1),
            ("offset_net.conv2.weight", &self.off_w2),
            ("offset_net.conv2.bias", &self.off_b2),
            ("offset_net.conv3.weight", &self.off_w3),
            ("offset_net.conv3.bias", &self.off_b3),
            ("mlp.fc1.weight", &self.mlp_w1),
            ("mlp.fc2.weight", &self.mlp_w2),
        ]
    }

    /// Parameter count of the projection + MLP subset, the quantity the
    /// `(3+2R)C²` formula describes.
    pub fn projection_mlp_param_count(&self) -> u64 {
        (self.p_q.numel() + self.p_k.numel() + self.p_v.numel() + self.mlp_w1.numel() + self.mlp_w2.numel())
            as u64
    }

    pub fn register(&self, tape: &mut Tape<T>) -> GdaVars {
        GdaVars {
            p_q: tape.leaf(self.p_q.clone()),
            p_k: tape.leaf(self.p_k.clone()),
            p_v: tape.leaf(self.p_v.clone()),
            off_w1: tape.leaf(self.off_w1.clone()),
            off_b1: tape.leaf(self.off_b1.clone()),
            off_w2: tape.leaf(self.off_w2.clone()),
            off_b2: tape.leaf(self.off_b2.clone()),
            off_w3: tape.leaf(self.off_w3.clone()),
            off_b3: tape.leaf(self.off_b3.clone()),
            mlp_w1: tape.leaf(self.mlp_w1.clone()),
            mlp_w2: tape.leaf(self.mlp_w2.clone()),
        }
    }
}

/// Tape handles to one GDA unit's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GdaVars {
    pub p_q: Var,
    pub p_k: Var,
    pub p_v: Var,
    pub off_w1: Var,
    pub off_b1: Var,
    pub off_w2: Var,
    pub off_b2: Var,
    pub off_w3: Var,
    pub off_b3: Var,
    pub mlp_w1: Var,
    pub mlp_w2: Var,
}

impl GdaVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.p_q, self.p_k, self.p_v, self.off_w1, self.off_b1, self.off_w2, self.off_b2,
            self.off_w3, self.off_b3, self.mlp_w1, self.mlp_w2,
        ]
    }
}

/// Per-pixel attention weights and offsets of one alignment call.
#[derive(Debug, Clone)]
pub struct GdaDiagnostics<T: Scalar> {
    /// `[N, G, heads_per_group, H, W, N·M]`, rows sum to 1 over the last axis.
    pub attention: Tensor<T>,
    /// The clamped offsets used for sampling.
    pub offsets: OffsetSet<T>,
}

/// Tape handles produced by [`build_gda_align`].
pub struct GdaBuild {
    /// Aligned clip feature, `[N, H, W, C]`.
    pub aligned: Var,
    /// Updated pairwise flows for the next layer, `[N, N, H, W, 2]`.
    pub new_flows: Var,
    /// Clamped offset-net output per target frame, each `[H, W, N·G·M·2]`.
    pub offsets_per_target: Vec<Var>,
    /// Attention maps per (target frame, group), each `[H·W·Hpg, 1, N·M]`.
    pub attention: Vec<Var>,
}

// ── index map builders ───────────────────────────────────────────────────

fn channel_slice_idx(pixels: usize, ctotal: usize, cstart: usize, clen: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(pixels * clen);
    for p in 0..pixels {
        for c in 0..clen {
            idx.push((p * ctotal + cstart + c) as u32);
        }
    }
    idx
}

fn expand_mid_idx(pixels: usize, mid: usize, inner: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(pixels * mid * inner);
    for p in 0..pixels {
        for _ in 0..mid {
            for c in 0..inner {
                idx.push((p * inner + c) as u32);
            }
        }
    }
    idx
}

/// `[P, L, Hpg, dh] -> [P, Hpg, L, dh]`
fn head_perm_idx(pixels: usize, l: usize, hpg: usize, dh: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(pixels * l * hpg * dh);
    for p in 0..pixels {
        for h in 0..hpg {
            for li in 0..l {
                for d in 0..dh {
                    idx.push((((p * l + li) * hpg + h) * dh + d) as u32);
                }
            }
        }
    }
    idx
}

/// Slice frame `i` off axis 0, dropping the leading extent.
pub(crate) fn slice_frame<T: Scalar>(tape: &mut Tape<T>, x: Var, i: usize) -> Var {
    let inner: Vec<usize> = tape.val(x).shape()[1..].to_vec();
    let s = tape.slice_axis0(x, i, 1);
    tape.reshape(s, inner)
}

/// Stack equal-shape vars into a new leading axis.
pub(crate) fn stack_frames<T: Scalar>(tape: &mut Tape<T>, frames: &[Var]) -> Var {
    let inner = tape.val(frames[0]).shape().to_vec();
    let lifted: Vec<Var> = frames
        .iter()
        .map(|&f| {
            let mut s = vec![1];
            s.extend_from_slice(&inner);
            tape.reshape(f, s)
        })
        .collect();
    tape.concat_axis(&lifted, 0)
}

fn grid_tensor<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(T::from_f64(y as f64));
            data.push(T::from_f64(x as f64));
        }
    }
    Tensor::new(vec![h, w, 2], data)
}

/// The offset-prediction CNN applied per target frame: the target frame's
/// previous-layer feature, the pre-aligned source frames, and the guiding
/// flows are concatenated along channels and pushed through three 3x3
/// convolutions. Output channels are ordered `(source frame, group,
/// candidate, dy/dx)` and clamped to the offset bound.
#[allow(clippy::too_many_arguments)]
fn build_offset_net<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GdaConfig,
    vars: &GdaVars,
    cur_frames: &[Var],
    prealigned: &[Vec<Var>],
    flow_fields: &[Vec<Var>],
) -> Vec<Var> {
    let n = cur_frames.len();
    let mut offs = Vec::with_capacity(n);
    for tn in 0..n {
        let mut parts = vec![cur_frames[tn]];
        parts.extend_from_slice(&prealigned[tn]);
        parts.extend_from_slice(&flow_fields[tn]);
        let inp = tape.concat_axis(&parts, 2);
        let c1 = tape.conv2d(inp, vars.off_w1, 1, 1);
        let c1 = tape.bias_add(c1, vars.off_b1);
        let a1 = tape.relu(c1);
        let c2 = tape.conv2d(a1, vars.off_w2, 1, 1);
        let c2 = tape.bias_add(c2, vars.off_b2);
        let a2 = tape.relu(c2);
        let c3 = tape.conv2d(a2, vars.off_w3, 1, 1);
        let c3 = tape.bias_add(c3, vars.off_b3);
        offs.push(tape.clamp_sym(c3, T::from_f64(cfg.max_offset)));
    }
    offs
}

/// Build the full guided deformable attention computation on a tape.
///
/// `src_i`: current-layer feature of the source clip (values), `[N, H, W, C]`.
/// `flows`: pairwise flows target <- source, `[N, N, H, W, 2]`.
/// `src_prev`: previous-layer feature of the source clip (keys).
/// `cur_prev`: previous-layer feature of the target clip (queries).
pub fn build_gda_align<T: Scalar>(
    tape: &mut Tape<T>,
    cache: &mut IdxCache,
    cfg: &GdaConfig,
    vars: &GdaVars,
    src_i: Var,
    flows: Var,
    src_prev: Var,
    cur_prev: Var,
) -> GdaBuild {
    let shape = tape.val(src_i).shape().to_vec();
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let ec = cfg.qk_channels();
    let (g_cnt, m_cnt, heads) = (cfg.groups, cfg.candidates, cfg.heads);
    let hpg = heads / g_cnt;
    let dh = ec / heads;
    let dvh = c / heads;
    let ecg = ec / g_cnt;
    let cg = c / g_cnt;
    let pix = h * w;
    let nm = n * m_cnt;

    // Frame and flow-field views.
    let src_frames: Vec<Var> = (0..n).map(|i| slice_frame(tape, src_i, i)).collect();
    let cur_frames: Vec<Var> = (0..n).map(|i| slice_frame(tape, cur_prev, i)).collect();
    let flow_fields: Vec<Vec<Var>> = (0..n)
        .map(|tn| {
            let row = slice_frame(tape, flows, tn);
            (0..n).map(|sn| slice_frame(tape, row, sn)).collect()
        })
        .collect();

    // Pre-alignment by flow warping (Eq. 3 of the guidance scheme).
    let prealigned: Vec<Vec<Var>> = (0..n)
        .map(|tn| (0..n).map(|sn| tape.flow_warp(src_frames[sn], flow_fields[tn][sn])).collect())
        .collect();

    // Offset prediction.
    let offs = build_offset_net(tape, cfg, vars, &cur_frames, &prealigned, &flow_fields);
    let off_ch = cfg.offset_net_out_channels(n);

    // Flow update: new flow = flow + mean over all G*M offsets.
    let mut new_flow_fields = Vec::with_capacity(n * n);
    for tn in 0..n {
        for sn in 0..n {
            let idx = cache.get_or(format!("gda.offslice.{pix}.{off_ch}.{sn}.{g_cnt}.{m_cnt}"), || {
                channel_slice_idx(pix, off_ch, sn * g_cnt * m_cnt * 2, g_cnt * m_cnt * 2)
            });
            let sl = tape.gather(offs[tn], idx, vec![h, w, g_cnt * m_cnt, 2]);
            let mean = tape.mean_middle(sl, pix, g_cnt * m_cnt, 2);
            let mean = tape.reshape(mean, vec![h, w, 2]);
            new_flow_fields.push(tape.add(flow_fields[tn][sn], mean));
        }
    }
    let stacked = stack_frames(tape, &new_flow_fields);
    let new_flows = tape.reshape(stacked, vec![n, n, h, w, 2]);

    // Projections happen before sampling.
    let k_full = tape.dense(src_prev, vars.p_k);
    let v_full = tape.dense(src_i, vars.p_v);
    let q_full = tape.dense(cur_prev, vars.p_q);

    // Per-frame per-group channel views of keys and values.
    let k_slice_idx: Vec<Arc<Vec<u32>>> = (0..g_cnt)
        .map(|g| {
            cache.get_or(format!("gda.chslice.{pix}.{ec}.{g}.{ecg}"), || {
                channel_slice_idx(pix, ec, g * ecg, ecg)
            })
        })
        .collect();
    let v_slice_idx: Vec<Arc<Vec<u32>>> = (0..g_cnt)
        .map(|g| {
            cache.get_or(format!("gda.chslice.{pix}.{c}.{g}.{cg}"), || {
                channel_slice_idx(pix, c, g * cg, cg)
            })
        })
        .collect();
    let mut k_gf = vec![Vec::with_capacity(g_cnt); n];
    let mut v_gf = vec![Vec::with_capacity(g_cnt); n];
    for sn in 0..n {
        let kf = slice_frame(tape, k_full, sn);
        let vf = slice_frame(tape, v_full, sn);
        for g in 0..g_cnt {
            k_gf[sn].push(tape.gather(kf, k_slice_idx[g].clone(), vec![h, w, ecg]));
            v_gf[sn].push(tape.gather(vf, v_slice_idx[g].clone(), vec![h, w, cg]));
        }
    }

    // Sampling locations: grid + flow + per-group offsets.
    let grid = tape.leaf(grid_tensor(h, w));
    let expand_idx = cache.get_or(format!("gda.expandm.{pix}.{m_cnt}"), || {
        expand_mid_idx(pix, m_cnt, 2)
    });
    let mut k_samp = vec![vec![Vec::with_capacity(g_cnt); n]; n];
    let mut v_samp = vec![vec![Vec::with_capacity(g_cnt); n]; n];
    for tn in 0..n {
        for sn in 0..n {
            let base = tape.add(grid, flow_fields[tn][sn]);
            let base_m = tape.gather(base, expand_idx.clone(), vec![h, w, m_cnt, 2]);
            for g in 0..g_cnt {
                let idx = cache.get_or(
                    format!("gda.offsel.{pix}.{off_ch}.{sn}.{g}.{m_cnt}"),
                    || channel_slice_idx(pix, off_ch, (sn * g_cnt + g) * m_cnt * 2, m_cnt * 2),
                );
                let osl = tape.gather(offs[tn], idx, vec![h, w, m_cnt, 2]);
                let coords = tape.add(base_m, osl);
                k_samp[tn][sn].push(tape.bilinear_sample(k_gf[sn][g], coords));
                v_samp[tn][sn].push(tape.bilinear_sample(v_gf[sn][g], coords));
            }
        }
    }

    // Multi-group multi-head attention over the N*M sampled locations.
    let kp_idx = cache.get_or(format!("gda.headperm.{pix}.{nm}.{hpg}.{dh}"), || {
        head_perm_idx(pix, nm, hpg, dh)
    });
    let vp_idx = cache.get_or(format!("gda.headperm.{pix}.{nm}.{hpg}.{dvh}"), || {
        head_perm_idx(pix, nm, hpg, dvh)
    });
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let batch = pix * hpg;
    let mut attention = Vec::with_capacity(n * g_cnt);
    let mut aligned_frames = Vec::with_capacity(n);
    for tn in 0..n {
        let q_frame = slice_frame(tape, q_full, tn);
        let mut group_outs = Vec::with_capacity(g_cnt);
        for g in 0..g_cnt {
            let ks: Vec<Var> = (0..n).map(|sn| k_samp[tn][sn][g]).collect();
            let vs: Vec<Var> = (0..n).map(|sn| v_samp[tn][sn][g]).collect();
            let k_cat = tape.concat_axis(&ks, 2);
            let v_cat = tape.concat_axis(&vs, 2);
            let q_g = tape.gather(q_frame, k_slice_idx[g].clone(), vec![h, w, ecg]);
            let k_perm = tape.gather(k_cat, kp_idx.clone(), vec![batch, nm, dh]);
            let v_perm = tape.gather(v_cat, vp_idx.clone(), vec![batch, nm, dvh]);
            let scores = tape.bmm_nt(q_g, k_perm, batch, 1, dh, nm);
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_last(scaled);
            attention.push(attn);
            let out = tape.bmm(attn, v_perm, batch, 1, nm, dvh);
            group_outs.push(tape.reshape(out, vec![h, w, cg]));
        }
        let fused = tape.concat_axis(&group_outs, 2);
        // Residual channel interaction.
        let hidden = tape.dense(fused, vars.mlp_w1);
        let act = tape.gelu(hidden);
        let mlp_out = tape.dense(act, vars.mlp_w2);
        aligned_frames.push(tape.add(fused, mlp_out));
    }
    let aligned = stack_frames(tape, &aligned_frames);

    GdaBuild { aligned, new_flows, offsets_per_target: offs, attention }
}

// ── eager operation surface ──────────────────────────────────────────────

/// Warp every source frame toward every target frame: entry `(n, n')` is
/// `flow_warp(src frame n', flows[n, n'])`. Output `[N, N, H, W, C]`.
pub fn prealign<T: Scalar>(src: &ClipFeature<T>, flows: &PairwiseFlow<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = (src.frames(), src.height(), src.width(), src.channels());
    if flows.n() != n || flows.height() != h || flows.width() != w {
        return Err(Error::shape(format!(
            "prealign shapes inconsistent: clip [{n}, {h}, {w}, {c}], flows {:?}",
            flows.tensor().shape()
        )));
    }
    let frame_sz = h * w * c;
    let mut out = Vec::with_capacity(n * n * frame_sz);
    for tn in 0..n {
        for sn in 0..n {
            let frame = Tensor::new(
                vec![h, w, c],
                src.tensor().data()[sn * frame_sz..(sn + 1) * frame_sz].to_vec(),
            );
            let warped = crate::kernel::flow_warp(&frame, &flows.field(tn, sn))?;
            out.extend_from_slice(warped.data());
        }
    }
    Ok(Tensor::new(vec![n, n, h, w, c], out))
}

fn offsets_to_set<T: Scalar>(
    per_target: &[Tensor<T>],
    n: usize,
    g_cnt: usize,
    m_cnt: usize,
    h: usize,
    w: usize,
) -> OffsetSet<T> {
    let mut data = vec![T::zero(); n * n * g_cnt * m_cnt * h * w * 2];
    let off_ch = n * g_cnt * m_cnt * 2;
    for tn in 0..n {
        let src = per_target[tn].data();
        for sn in 0..n {
            for g in 0..g_cnt {
                for m in 0..m_cnt {
                    for y in 0..h {
                        for x in 0..w {
                            for cc in 0..2 {
                                let ch = ((sn * g_cnt + g) * m_cnt + m) * 2 + cc;
                                let v = src[(y * w + x) * off_ch + ch];
                                let dst =
                                    (((((tn * n + sn) * g_cnt + g) * m_cnt + m) * h + y) * w + x) * 2 + cc;
                                data[dst] = v;
                            }
                        }
                    }
                }
            }
        }
    }
    OffsetSet { data: Tensor::new(vec![n, n, g_cnt, m_cnt, h, w, 2], data) }
}

/// Predict sampling offsets from the target clip's previous-layer feature,
/// the pre-aligned source frames, and the guiding flows.
pub fn predict_offsets<T: Scalar>(
    cur: &ClipFeature<T>,
    prealigned: &Tensor<T>,
    flows: &PairwiseFlow<T>,
    w: &GdaWeights<T>,
    cfg: &GdaConfig,
) -> Result<OffsetSet<T>> {
    cfg.validate()?;
    let (n, hh, ww, c) = (cur.frames(), cur.height(), cur.width(), cur.channels());
    if c != cfg.channels {
        return Err(Error::shape(format!("clip has {c} channels, config says {}", cfg.channels)));
    }
    if prealigned.shape() != [n, n, hh, ww, c] {
        return Err(Error::shape(format!(
            "prealigned must be [{n}, {n}, {hh}, {ww}, {c}], got {:?}",
            prealigned.shape()
        )));
    }
    if flows.n() != n || flows.height() != hh || flows.width() != ww {
        return Err(Error::shape("flows inconsistent with clip"));
    }
    if w.off_w1.shape()[2] != cfg.offset_net_in_channels(n) {
        return Err(Error::shape(format!(
            "offset net expects {} input channels, weights have {}",
            cfg.offset_net_in_channels(n),
            w.off_w1.shape()[2]
        )));
    }

    let mut tape = Tape::<T>::new();
    let vars = w.register(&mut tape);
    let frame_sz = hh * ww * c;
    let cur_frames: Vec<Var> = (0..n)
        .map(|tn| {
            tape.leaf(Tensor::new(
                vec![hh, ww, c],
                cur.tensor().data()[tn * frame_sz..(tn + 1) * frame_sz].to_vec(),
            ))
        })
        .collect();
    let pre: Vec<Vec<Var>> = (0..n)
        .map(|tn| {
            (0..n)
                .map(|sn| {
                    let base = (tn * n + sn) * frame_sz;
                    tape.leaf(Tensor::new(
                        vec![hh, ww, c],
                        prealigned.data()[base..base + frame_sz].to_vec(),
                    ))
                })
                .collect()
        })
        .collect();
    let ff: Vec<Vec<Var>> = (0..n)
        .map(|tn| (0..n).map(|sn| tape.leaf(flows.field(tn, sn))).collect())
        .collect();
    let offs = build_offset_net(&mut tape, cfg, &vars, &cur_frames, &pre, &ff);
    let per_target: Vec<Tensor<T>> = offs.iter().map(|&v| tape.val(v).clone()).collect();
    Ok(offsets_to_set(&per_target, n, cfg.groups, cfg.candidates, hh, ww))
}

/// Flow refinement: each pairwise flow moves by the mean of its G·M offsets.
pub fn update_flow<T: Scalar>(flows: &PairwiseFlow<T>, offsets: &OffsetSet<T>) -> Result<PairwiseFlow<T>> {
    let s = offsets.tensor().shape().to_vec();
    let (n, g_cnt, m_cnt, h, w) = (s[0], s[2], s[3], s[4], s[5]);
    if flows.n() != n || flows.height() != h || flows.width() != w {
        return Err(Error::shape(format!(
            "flows {:?} inconsistent with offsets {s:?}",
            flows.tensor().shape()
        )));
    }
    let mut out = flows.tensor().data().to_vec();
    let inv = T::from_f64(1.0 / (g_cnt * m_cnt) as f64);
    for tn in 0..n {
        for sn in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for cc in 0..2 {
                        let mut acc = T::zero();
                        for g in 0..g_cnt {
                            for m in 0..m_cnt {
                                acc = acc + offsets.at(tn, sn, g, m, y, x, cc);
                            }
                        }
                        let i = (((tn * n + sn) * h + y) * w + x) * 2 + cc;
                        out[i] = out[i] + acc * inv;
                    }
                }
            }
        }
    }
    PairwiseFlow::new(Tensor::new(vec![n, n, h, w, 2], out))
}

/// Extract diagnostics from a finished build.
pub fn extract_diagnostics<T: Scalar>(
    tape: &Tape<T>,
    build: &GdaBuild,
    cfg: &GdaConfig,
) -> GdaDiagnostics<T> {
    let n = build.offsets_per_target.len();
    let shape = tape.val(build.offsets_per_target[0]).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let (g_cnt, m_cnt) = (cfg.groups, cfg.candidates);
    let hpg = cfg.heads / g_cnt;
    let nm = n * m_cnt;

    let per_target: Vec<Tensor<T>> =
        build.offsets_per_target.iter().map(|&v| tape.val(v).clone()).collect();
    let offsets = offsets_to_set(&per_target, n, g_cnt, m_cnt, h, w);

    let mut attn = vec![T::zero(); n * g_cnt * hpg * h * w * nm];
    for tn in 0..n {
        for g in 0..g_cnt {
            let src = tape.val(build.attention[tn * g_cnt + g]).data();
            for p in 0..h * w {
                for hh in 0..hpg {
                    for l in 0..nm {
                        let dst = ((((tn * g_cnt + g) * hpg + hh) * h * w + p) * nm) + l;
                        attn[dst] = src[(p * hpg + hh) * nm + l];
                    }
                }
            }
        }
    }
    GdaDiagnostics {
        attention: Tensor::new(vec![n, g_cnt, hpg, h, w, nm], attn),
        offsets,
    }
}

/// One-stage clip-to-clip alignment: warp, offset prediction, deformable
/// multi-group multi-head attention, residual MLP, and flow refinement.
pub fn gda_align<T: Scalar>(
    src_i: &ClipFeature<T>,
    flows: &PairwiseFlow<T>,
    src_prev_layer: &ClipFeature<T>,
    cur_prev_layer: &ClipFeature<T>,
    w: &GdaWeights<T>,
    cfg: &GdaConfig,
) -> Result<(ClipFeature<T>, PairwiseFlow<T>, GdaDiagnostics<T>)> {
    cfg.validate()?;
    let (n, h, ww, c) = (src_i.frames(), src_i.height(), src_i.width(), src_i.channels());
    if c != cfg.channels {
        return Err(Error::shape(format!("clip has {c} channels, config says {}", cfg.channels)));
    }
    for (name, clip) in [("src_prev_layer", src_prev_layer), ("cur_prev_layer", cur_prev_layer)] {
        if clip.tensor().shape() != src_i.tensor().shape() {
            return Err(Error::shape(format!(
                "{name} shape {:?} differs from src {:?}",
                clip.tensor().shape(),
                src_i.tensor().shape()
            )));
        }
    }
    if flows.n() != n || flows.height() != h || flows.width() != ww {
        return Err(Error::shape("flows inconsistent with clips"));
    }

    let mut tape = Tape::<T>::new();
    let mut cache = IdxCache::new();
    let vars = w.register(&mut tape);
    let src_v = tape.leaf(src_i.tensor().clone());
    let flow_v = tape.leaf(flows.tensor().clone());
    let srcp_v = tape.leaf(src_prev_layer.tensor().clone());
    let curp_v = tape.leaf(cur_prev_layer.tensor().clone());
    let build = build_gda_align(&mut tape, &mut cache, cfg, &vars, src_v, flow_v, srcp_v, curp_v);

    let aligned = ClipFeature::new(tape.val(build.aligned).clone())?
        .with_indices(src_i.clip_index, src_i.layer_index);
    let new_flows = PairwiseFlow::new(tape.val(build.new_flows).clone())?;
    let diagnostics = extract_diagnostics(&tape, &build, cfg);
    Ok((aligned, new_flows, diagnostics))
}

/// Parameter-count comparison of one GDA unit against a deformable
/// convolution with `M` sampling locations (bias-free accounting).
/// GDA: `(2E + 1 + 2R)·C²`, which is `(3+2R)·C²` at `E = 1`; DCN: `M·C²`.
pub fn gda_param_count(c: usize, r: f64, m: usize, e: f64) -> (u64, u64) {
    let c2 = (c * c) as f64;
    let gda = ((2.0 * e + 1.0 + 2.0 * r) * c2).round() as u64;
    let dcn = (m as f64 * c2).round() as u64;
    (gda, dcn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{clip_pairwise_flows, Direction, FlowProvider};
    use crate::gradcheck::{gradcheck, DEFAULT_H, DEFAULT_TOL};

    fn toy_cfg() -> GdaConfig {
        GdaConfig {
            channels: 8,
            groups: 2,
            candidates: 3,
            heads: 2,
            mlp_ratio: 2.0,
            expansion: 1.0,
            max_offset: 10.0,
        }
    }

    fn random_clip(seed: u64, n: usize, h: usize, w: usize, c: usize) -> ClipFeature<f64> {
        let t = SeedStream::new(seed, "clip").uniform_tensor(vec![n, h, w, c], -1.0, 1.0);
        ClipFeature::new(t).unwrap()
    }

    fn random_flows(seed: u64, n: usize, h: usize, w: usize, lo: f64, hi: f64) -> PairwiseFlow<f64> {
        let t = SeedStream::new(seed, "flows").uniform_tensor(vec![n, n, h, w, 2], lo, hi);
        PairwiseFlow::new(t).unwrap()
    }

    #[test]
    fn prealign_zero_flows_copies_source() {
        let src = random_clip(60, 2, 4, 4, 3);
        let flows = PairwiseFlow::zeros(2, 4, 4);
        let pre = prealign(&src, &flows).unwrap();
        assert_eq!(pre.shape(), &[2, 2, 4, 4, 3]);
        let fsz = 4 * 4 * 3;
        for tn in 0..2 {
            for sn in 0..2 {
                let base = (tn * 2 + sn) * fsz;
                assert_eq!(&pre.data()[base..base + fsz], &src.tensor().data()[sn * fsz..(sn + 1) * fsz]);
            }
        }
    }

    #[test]
    fn prealign_single_frame_is_flow_warp() {
        let src = random_clip(61, 1, 5, 5, 2);
        let flows = random_flows(62, 1, 5, 5, -1.0, 1.0);
        let pre = prealign(&src, &flows).unwrap();
        let frame = Tensor::new(vec![5, 5, 2], src.tensor().data().to_vec());
        let want = crate::kernel::flow_warp(&frame, &flows.field(0, 0)).unwrap();
        assert!(Tensor::new(vec![5, 5, 2], pre.data().to_vec()).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn prealign_reconstructs_translating_video_interior() {
        // Frames translate 1 px/frame along x; ground-truth flows must
        // reconstruct the target frame away from the clamped border.
        let (h, w, c) = (10, 10, 2);
        let canvas: Tensor<f64> = SeedStream::new(63, "canvas").uniform_tensor(vec![h, w + 8, c], 0.0, 1.0);
        let frame = |t: usize| {
            let mut data = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    for cc in 0..c {
                        data.push(canvas.data()[(y * (w + 8) + x + 4 - t) * c + cc]);
                    }
                }
            }
            Tensor::new(vec![h, w, c], data)
        };
        // Clip pair with N=2: source clip frames (0, 1), target clip (2, 3).
        let mut src_data = frame(0).into_data();
        src_data.extend(frame(1).into_data());
        let src = ClipFeature::new(Tensor::new(vec![2, h, w, c], src_data)).unwrap();
        let provider = FlowProvider::SyntheticGt { motion: vec![(0.0, 1.0); 3], height: h, width: w };
        let cons: Tensor<f64> = provider.consecutive_flows(Direction::Forward).unwrap();
        let flows = clip_pairwise_flows(&cons, 2, 1, Direction::Forward).unwrap();
        let pre = prealign(&src, &flows).unwrap();
        for tn in 0..2 {
            let target = frame(2 + tn);
            for sn in 0..2 {
                for y in 0..h {
                    for x in 4..w {
                        // interior: border-clamped ring excluded
                        for cc in 0..c {
                            let got = pre.data()[((((tn * 2 + sn) * h) + y) * w + x) * c + cc];
                            let want = target.data()[(y * w + x) * c + cc];
                            assert!(
                                (got - want).abs() < 1e-6,
                                "tn={tn} sn={sn} y={y} x={x}: {got} vs {want}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn predict_offsets_zero_init_gives_zeros() {
        let cfg = toy_cfg();
        let mut rng = SeedStream::new(64, "w");
        let w = GdaWeights::<f64>::init(&cfg, 2, &mut rng);
        let cur = random_clip(65, 2, 4, 4, 8);
        let src = random_clip(66, 2, 4, 4, 8);
        let flows = random_flows(67, 2, 4, 4, -1.0, 1.0);
        let pre = prealign(&src, &flows).unwrap();
        let offs = predict_offsets(&cur, &pre, &flows, &w, &cfg).unwrap();
        assert_eq!(offs.tensor().shape(), &[2, 2, 2, 3, 4, 4, 2]);
        assert!(offs.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_offsets_respects_clamp_bound() {
        let mut cfg = toy_cfg();
        cfg.max_offset = 0.05;
        let mut rng = SeedStream::new(68, "w");
        let mut w = GdaWeights::<f64>::init(&cfg, 2, &mut rng);
        // Large random output layer to force values past the bound.
        w.off_w3 = rng.normal_tensor(w.off_w3.shape().to_vec(), 0.0, 2.0);
        w.off_b3 = rng.normal_tensor(w.off_b3.shape().to_vec(), 0.0, 2.0);
        let cur = random_clip(69, 2, 4, 4, 8);
        let src = random_clip(70, 2, 4, 4, 8);
        let flows = random_flows(71, 2, 4, 4, -1.0, 1.0);
        let pre = prealign(&src, &flows).unwrap();
        let offs = predict_offsets(&cur, &pre, &flows, &w, &cfg).unwrap();
        let mx = offs.tensor().data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(mx <= 0.05 + 1e-12);
        assert!(mx > 0.049, "clamp should actually bind, got max {mx}");
        assert!(offs.tensor().is_finite());
    }

    #[test]
    fn update_flow_contracts() {
        let flows = random_flows(72, 2, 3, 3, -1.0, 1.0);
        let zero = OffsetSet::<f64>::zeros(2, 2, 3, 3, 3);
        let same = update_flow(&flows, &zero).unwrap();
        assert!(same.tensor().max_abs_diff(flows.tensor()) < 1e-15);

        let c = 0.37;
        let constant = OffsetSet::new(Tensor::full(vec![2, 2, 2, 3, 3, 3, 2], c)).unwrap();
        let shifted = update_flow(&flows, &constant).unwrap();
        let want = flows.tensor().map(|v| v + c);
        assert!(shifted.tensor().max_abs_diff(&want) < 1e-12);

        // Loop-and-average oracle on random offsets.
        let off_t: Tensor<f64> =
            SeedStream::new(73, "off").uniform_tensor(vec![2, 2, 2, 3, 3, 3, 2], -2.0, 2.0);
        let offs = OffsetSet::new(off_t).unwrap();
        let got = update_flow(&flows, &offs).unwrap();
        for tn in 0..2 {
            for sn in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        for cc in 0..2 {
                            let mut acc = 0.0;
                            for g in 0..2 {
                                for m in 0..3 {
                                    acc += offs.at(tn, sn, g, m, y, x, cc);
                                }
                            }
                            let i = (((tn * 2 + sn) * 3 + y) * 3 + x) * 2 + cc;
                            let want = flows.tensor().data()[i] + acc / 6.0;
                            assert!((got.tensor().data()[i] - want).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gda_align_singleton_softmax_reduces_to_flow_warp() {
        // M=1, zero offsets, identity projections, zeroed MLP, G=heads=1,
        // N=1: softmax over one logit is 1, so alignment is exactly warping.
        let cfg = GdaConfig {
            channels: 4,
            groups: 1,
            candidates: 1,
            heads: 1,
            mlp_ratio: 2.0,
            expansion: 1.0,
            max_offset: 10.0,
        };
        let w = GdaWeights::<f64>::warp_identity(&cfg, 1);
        let src = random_clip(74, 1, 6, 6, 4);
        let src_prev = random_clip(75, 1, 6, 6, 4);
        let cur_prev = random_clip(76, 1, 6, 6, 4);
        let flows = random_flows(77, 1, 6, 6, -2.0, 2.0);
        let (aligned, new_flows, diag) = gda_align(&src, &flows, &src_prev, &cur_prev, &w, &cfg).unwrap();

        let frame = Tensor::new(vec![6, 6, 4], src.tensor().data().to_vec());
        let want = crate::kernel::flow_warp(&frame, &flows.field(0, 0)).unwrap();
        let got = Tensor::new(vec![6, 6, 4], aligned.tensor().data().to_vec());
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert!(new_flows.tensor().max_abs_diff(flows.tensor()) < 1e-15);
        assert!(diag.attention.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gda_align_identical_sources_under_convex_combination() {
        // All source frames identical, zero flows/offsets, identity
        // projections: any convex combination returns the shared frame.
        let cfg = GdaConfig {
            channels: 4,
            groups: 2,
            candidates: 3,
            heads: 2,
            mlp_ratio: 1.0,
            expansion: 1.0,
            max_offset: 10.0,
        };
        let w = GdaWeights::<f64>::warp_identity(&cfg, 2);
        let one: Tensor<f64> = SeedStream::new(78, "frame").uniform_tensor(vec![4, 4, 4], -1.0, 1.0);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let src = ClipFeature::new(Tensor::new(vec![2, 4, 4, 4], data)).unwrap();
        let cur_prev = random_clip(79, 2, 4, 4, 4);
        let flows = PairwiseFlow::zeros(2, 4, 4);
        let (aligned, _, diag) = gda_align(&src, &flows, &src, &cur_prev, &w, &cfg).unwrap();
        for tn in 0..2 {
            let got = &aligned.tensor().data()[tn * 64..(tn + 1) * 64];
            for (a, b) in got.iter().zip(one.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Attention rows are normalized.
        for row in diag.attention.data().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    fn randomized_weights(cfg: &GdaConfig, n: usize, seed: u64) -> GdaWeights<f64> {
        let mut rng = SeedStream::new(seed, "gdaw");
        let mut w = GdaWeights::<f64>::init(cfg, n, &mut rng);
        // Live offset path: small but nonzero output layer.
        w.off_w3 = rng.normal_tensor(w.off_w3.shape().to_vec(), 0.0, 0.05);
        w.off_b3 = rng.normal_tensor(w.off_b3.shape().to_vec(), 0.0, 0.05);
        w
    }

    /// Brute-force oracle: recomputes projections, bilinear sampling,
    /// per-head softmax attention, and the MLP with plain nested loops,
    /// given the offsets.
    fn gda_attention_oracle(
        cfg: &GdaConfig,
        src_i: &ClipFeature<f64>,
        flows: &PairwiseFlow<f64>,
        src_prev: &ClipFeature<f64>,
        cur_prev: &ClipFeature<f64>,
        w: &GdaWeights<f64>,
        offs: &OffsetSet<f64>,
    ) -> Tensor<f64> {
        let (n, h, ww, c) = (src_i.frames(), src_i.height(), src_i.width(), src_i.channels());
        let ec = cfg.qk_channels();
        let (g_cnt, m_cnt, heads) = (cfg.groups, cfg.candidates, cfg.heads);
        let hpg = heads / g_cnt;
        let dh = ec / heads;
        let dvh = c / heads;
        let ecg = ec / g_cnt;
        let cg = c / g_cnt;
        let hid = cfg.mlp_hidden();

        let proj = |clip: &ClipFeature<f64>, mat: &Tensor<f64>, outc: usize| -> Vec<f64> {
            let mut out = vec![0.0; n * h * ww * outc];
            for fr in 0..n {
                for p in 0..h * ww {
                    for oc in 0..outc {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            acc += clip.tensor().data()[(fr * h * ww + p) * c + ic]
                                * mat.data()[ic * outc + oc];
                        }
                        out[(fr * h * ww + p) * outc + oc] = acc;
                    }
                }
            }
            out
        };
        let k_full = proj(src_prev, &w.p_k, ec);
        let v_full = proj(src_i, &w.p_v, c);
        let q_full = proj(cur_prev, &w.p_q, ec);

        let sample = |field: &[f64], fr: usize, fc: usize, y: f64, x: f64, ch: usize| -> f64 {
            let yc = y.clamp(0.0, (h - 1) as f64);
            let xc = x.clamp(0.0, (ww - 1) as f64);
            let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
            let x0 = (xc.floor() as usize).min(ww.saturating_sub(2));
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(ww - 1));
            let (fy, fx) = (yc - y0 as f64, xc - x0 as f64);
            let at = |yy: usize, xx: usize| field[((fr * h + yy) * ww + xx) * fc + ch];
            (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                + (1.0 - fy) * fx * at(y0, x1)
                + fy * (1.0 - fx) * at(y1, x0)
                + fy * fx * at(y1, x1)
        };

        let gelu = |x: f64| {
            let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };

        let mut out = vec![0.0; n * h * ww * c];
        for tn in 0..n {
            for y in 0..h {
                for x in 0..ww {
                    let p = y * ww + x;
                    let mut fused = vec![0.0; c];
                    for g in 0..g_cnt {
                        for hh in 0..hpg {
                            let head = g * hpg + hh; // head's channel block within the group view
                            let _ = head;
                            // Query slice for this (group, head).
                            let q0 = g * ecg + hh * dh;
                            let q: Vec<f64> =
                                (0..dh).map(|d| q_full[(tn * h * ww + p) * ec + q0 + d]).collect();
                            // Gather keys/values at the N*M locations.
                            let mut logits = Vec::with_capacity(n * m_cnt);
                            let mut vals = Vec::with_capacity(n * m_cnt);
                            for sn in 0..n {
                                let fi = (((tn * n + sn) * h + y) * ww + x) * 2;
                                let (fy, fx) = (
                                    flows.tensor().data()[fi],
                                    flows.tensor().data()[fi + 1],
                                );
                                for m in 0..m_cnt {
                                    let oy = offs.at(tn, sn, g, m, y, x, 0);
                                    let ox = offs.at(tn, sn, g, m, y, x, 1);
                                    let sy = y as f64 + fy + oy;
                                    let sx = x as f64 + fx + ox;
                                    let mut dot = 0.0;
                                    for d in 0..dh {
                                        dot += q[d] * sample(&k_full, sn, ec, sy, sx, q0 + d);
                                    }
                                    logits.push(dot / (dh as f64).sqrt());
                                    let v0 = g * cg + hh * dvh;
                                    let v: Vec<f64> = (0..dvh)
                                        .map(|d| sample(&v_full, sn, c, sy, sx, v0 + d))
                                        .collect();
                                    vals.push(v);
                                }
                            }
                            // Softmax over the N*M locations.
                            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                            let z: f64 = exps.iter().sum();
                            for d in 0..dvh {
                                let mut acc = 0.0;
                                for (e, v) in exps.iter().zip(&vals) {
                                    acc += e / z * v[d];
                                }
                                fused[g * cg + hh * dvh + d] = acc;
                            }
                        }
                    }
                    // Residual MLP.
                    let mut hidv = vec![0.0; hid];
                    for hj in 0..hid {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            acc += fused[ic] * w.mlp_w1.data()[ic * hid + hj];
                        }
                        hidv[hj] = gelu(acc);
                    }
                    for oc in 0..c {
                        let mut acc = 0.0;
                        for hj in 0..hid {
                            acc += hidv[hj] * w.mlp_w2.data()[hj * c + oc];
                        }
                        out[(tn * h * ww + p) * c + oc] = fused[oc] + acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, h, ww, c], out)
    }

    #[test]
    fn gda_align_matches_exhaustive_attention_oracle() {
        let cfg = toy_cfg(); // N=2, H=W=4, C=8, G=2, M=3, heads=2
        let w = randomized_weights(&cfg, 2, 80);
        let src = random_clip(81, 2, 4, 4, 8);
        let src_prev = random_clip(82, 2, 4, 4, 8);
        let cur_prev = random_clip(83, 2, 4, 4, 8);
        let flows = random_flows(84, 2, 4, 4, -1.3, 1.3);

        let (aligned, new_flows, diag) = gda_align(&src, &flows, &src_prev, &cur_prev, &w, &cfg).unwrap();
        let want = gda_attention_oracle(&cfg, &src, &flows, &src_prev, &cur_prev, &w, &diag.offsets);
        assert!(
            aligned.tensor().max_abs_diff(&want) < 1e-8,
            "max diff {}",
            aligned.tensor().max_abs_diff(&want)
        );

        // The returned flows must equal Eq.-style mean refinement of the
        // returned offsets.
        let want_flows = update_flow(&flows, &diag.offsets).unwrap();
        assert!(new_flows.tensor().max_abs_diff(want_flows.tensor()) < 1e-12);
    }

    #[test]
    fn gda_align_invariant_under_candidate_permutation() {
        let cfg = toy_cfg();
        let w = randomized_weights(&cfg, 2, 85);
        // Permute the M candidate blocks of the offset-net output layer:
        // channel ch = ((sn*G + g)*M + m)*2 + c moves to m' = (m+1) % M.
        let (n, g_cnt, m_cnt) = (2usize, cfg.groups, cfg.candidates);
        let mut w2 = w.clone();
        let out_ch = cfg.offset_net_out_channels(n);
        let perm_ch = |ch: usize| -> usize {
            let c = ch % 2;
            let m = (ch / 2) % m_cnt;
            let rest = ch / (2 * m_cnt);
            (rest * m_cnt + (m + 1) % m_cnt) * 2 + c
        };
        {
            let src = w.off_w3.data();
            let dst = w2.off_w3.data_mut();
            let in_ch = w.off_w3.shape()[2];
            for tap in 0..9 * in_ch {
                for ch in 0..out_ch {
                    dst[tap * out_ch + perm_ch(ch)] = src[tap * out_ch + ch];
                }
            }
            for ch in 0..out_ch {
                w2.off_b3.data_mut()[perm_ch(ch)] = w.off_b3.data()[ch];
            }
        }
        let _ = g_cnt;
        let src = random_clip(86, 2, 4, 4, 8);
        let src_prev = random_clip(87, 2, 4, 4, 8);
        let cur_prev = random_clip(88, 2, 4, 4, 8);
        let flows = random_flows(89, 2, 4, 4, -1.0, 1.0);
        let (a1, f1, _) = gda_align(&src, &flows, &src_prev, &cur_prev, &w, &cfg).unwrap();
        let (a2, f2, _) = gda_align(&src, &flows, &src_prev, &cur_prev, &w2, &cfg).unwrap();
        assert!(a1.tensor().max_abs_diff(a2.tensor()) < 1e-10);
        assert!(f1.tensor().max_abs_diff(f2.tensor()) < 1e-10);
    }

    #[test]
    fn gda_param_count_matches_formula_and_measurement() {
        assert_eq!(gda_param_count(144, 2.0, 9, 1.0), (145_152, 186_624));
        assert_eq!(gda_param_count(1, 0.0, 1, 1.0), (3, 1));

        for (c, r) in [(8usize, 1.0), (16, 2.0), (144, 2.0)] {
            let cfg = GdaConfig {
                channels: c,
                groups: 1,
                candidates: 4,
                heads: 1,
                mlp_ratio: r,
                expansion: 1.0,
                max_offset: 10.0,
            };
            let mut rng = SeedStream::new(90, "w");
            let w = GdaWeights::<f64>::init(&cfg, 2, &mut rng);
            let (want, _) = gda_param_count(c, r, 4, 1.0);
            assert_eq!(w.projection_mlp_param_count(), want);
        }
    }

    #[test]
    fn gda_align_rejects_bad_divisibility() {
        let cfg = GdaConfig {
            channels: 6, // not divisible by groups=4
            groups: 4,
            candidates: 2,
            heads: 2,
            mlp_ratio: 1.0,
            expansion: 1.0,
            max_offset: 10.0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gda_weights_pass_sampled_gradcheck() {
        // Fast sampled check; the full elementwise sweep runs in the
        // acceptance suite.
        let cfg = toy_cfg();
        let w = randomized_weights(&cfg, 2, 91);
        let src = random_clip(92, 2, 4, 4, 8);
        let src_prev = random_clip(93, 2, 4, 4, 8);
        let cur_prev = random_clip(94, 2, 4, 4, 8);
        // Fractional flows keep sampling away from the bilinear lattice.
        let flows = random_flows(95, 2, 4, 4, 0.2, 0.8);
        let probe: Tensor<f64> = SeedStream::new(96, "probe").uniform_tensor(vec![2, 4, 4, 8], -1.0, 1.0);

        let inputs: Vec<(&str, Tensor<f64>)> = w
            .entries()
            .iter()
            .map(|(name, t)| (*name, (*t).clone()))
            .collect();
        let report = gradcheck(
            |tape, vars| {
                let mut cache = IdxCache::new();
                let gv = GdaVars {
                    p_q: vars[0],
                    p_k: vars[1],
                    p_v: vars[2],
                    off_w1: vars[3],
                    off_b1: vars[4],
                    off_w2: vars[5],
                    off_b2: vars[6],
                    off_w3: vars[7],
                    off_b3: vars[8],
                    mlp_w1: vars[9],
                    mlp_w2: vars[10],
                };
                let s = tape.leaf(src.tensor().clone());
                let f = tape.leaf(flows.tensor().clone());
                let sp = tape.leaf(src_prev.tensor().clone());
                let cp = tape.leaf(cur_prev.tensor().clone());
                let build = build_gda_align(tape, &mut cache, &cfg, &gv, s, f, sp, cp);
                let pr = tape.leaf(probe.clone());
                let weighted = tape.mul(build.aligned, pr);
                tape.sum_all(weighted)
            },
            &inputs,
            DEFAULT_H,
            Some(4),
            7,
        );
        assert!(report.passes(DEFAULT_TOL), "entries: {:?}", report.entries);
    }
}
