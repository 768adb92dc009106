//! End-to-end model: shallow feature extraction, stacked recurrent
//! refinement modules, reconstruction, loss, optimizer, parameter
//! accounting, and weight serialization.
//!
//! The 4x super-resolution path reconstructs by pixel shuffle on top of a
//! bicubic-upsampled skip of the input; the 1x path (deblurring/denoising)
//! downsamples features 4x with two strided convolutions, restores
//! resolution with a single 4x pixel shuffle, and adds the input as a
//! global residual.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{clip_pairwise_flows, Direction, FlowProvider};
use crate::gda::{GdaConfig, GdaWeights};
use crate::io;
use crate::kernel;
use crate::rfr::{
    build_mrstb, build_propagate, GdaDiagSite, MaskCache, MrstbVars, MrstbWeights, RfrModuleVars,
    RfrModuleWeights, WindowGeom,
};
use crate::rng::SeedStream;
use crate::tape::{IdxCache, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Numeric precision a run executes at. The generic parameter of
/// [`Model`] does the actual work; this field records the intent in
/// configs and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Model hyperparameters. Serializes to a flat JSON object; this is the
/// on-disk config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: usize,
    pub frames: usize,
    pub clip_size: usize,
    pub channels: usize,
    pub modules: usize,
    pub blocks_per_module: usize,
    pub layers_per_block: usize,
    pub window: (usize, usize),
    pub heads: usize,
    pub groups: usize,
    pub candidates: usize,
    pub mlp_ratio: f64,
    pub expansion: f64,
    pub max_offset: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale default configuration.
    pub fn toy() -> Self {
        ModelConfig {
            scale: 4,
            frames: 4,
            clip_size: 2,
            channels: 16,
            modules: 2,
            blocks_per_module: 1,
            layers_per_block: 2,
            window: (4, 4),
            heads: 2,
            groups: 2,
            candidates: 4,
            mlp_ratio: 2.0,
            expansion: 1.0,
            max_offset: 10.0,
            precision: Precision::F32,
            seed: 0,
        }
    }

    pub fn gda_config(&self) -> GdaConfig {
        GdaConfig {
            channels: self.channels,
            groups: self.groups,
            candidates: self.candidates,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            expansion: self.expansion,
            max_offset: self.max_offset,
        }
    }

    /// Window geometry inside refinement modules (temporal extent = clip).
    pub fn clip_geom(&self) -> WindowGeom {
        WindowGeom { wt: self.clip_size, wh: self.window.0, ww: self.window.1, heads: self.heads }
    }

    /// Window geometry of the per-frame shallow/reconstruction blocks.
    pub fn frame_geom(&self) -> WindowGeom {
        WindowGeom { wt: 1, wh: self.window.0, ww: self.window.1, heads: self.heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 1 && self.scale != 4 {
            return Err(Error::config(format!("scale must be 1 or 4, got {}", self.scale)));
        }
        if self.frames == 0 || self.clip_size == 0 || self.modules == 0 {
            return Err(Error::config("frames, clip_size and modules must be positive"));
        }
        if self.blocks_per_module == 0 || self.layers_per_block == 0 {
            return Err(Error::config("block and layer counts must be positive"));
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return Err(Error::config("window extents must be positive"));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        self.gda_config().validate()
    }

    /// Input extents are padded (reflection) up to these multiples before
    /// the network runs.
    pub fn input_multiple(&self) -> (usize, usize) {
        let f = if self.scale == 1 { 4 } else { 1 };
        (f * self.window.0, f * self.window.1)
    }

    pub fn padded_input_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (mh, mw) = self.input_multiple();
        (h.div_ceil(mh) * mh, w.div_ceil(mw) * mw)
    }

    /// Spatial extents at which features (and therefore flows) live.
    pub fn feature_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (hp, wp) = self.padded_input_dims(h, w);
        if self.scale == 1 { (hp / 4, wp / 4) } else { (hp, wp) }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        let digest = hasher.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::config(format!("bad config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// All parameter tensors, grouped by sub-module.
#[derive(Debug, Clone)]
pub struct ModelWeights<T: Scalar> {
    pub conv_in_w: Tensor<T>,
    pub conv_in_b: Tensor<T>,
    /// Two stride-2 downsampling convolutions, present only at scale 1.
    pub down: Option<[(Tensor<T>, Tensor<T>); 2]>,
    pub shallow_block: MrstbWeights<T>,
    pub modules: Vec<RfrModuleWeights<T>>,
    pub recon_block: MrstbWeights<T>,
    pub conv_up_w: Tensor<T>,
    pub conv_up_b: Tensor<T>,
    /// Final 3-channel projection after the pixel shuffle, scale 1 only.
    pub conv_out: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn init(cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let mut root = SeedStream::new(cfg.seed, "init");
        let mut shallow = root.child("shallow");
        let conv_in_w = shallow.trunc_normal_tensor(vec![3, 3, 3, c], 0.02);
        let conv_in_b = Tensor::zeros(vec![c]);
        let down = (cfg.scale == 1).then(|| {
            [
                (shallow.trunc_normal_tensor(vec![3, 3, c, c], 0.02), Tensor::zeros(vec![c])),
                (shallow.trunc_normal_tensor(vec![3, 3, c, c], 0.02), Tensor::zeros(vec![c])),
            ]
        });
        let frame_geom = cfg.frame_geom();
        let shallow_block = MrstbWeights::init(c, cfg.layers_per_block, &frame_geom, &mut shallow);

        let gda_cfg = cfg.gda_config();
        let clip_geom = cfg.clip_geom();
        let modules = (1..=cfg.modules)
            .map(|i| {
                let mut stream = root.child(&format!("module{i}"));
                RfrModuleWeights::init(
                    c,
                    i,
                    cfg.clip_size,
                    &gda_cfg,
                    cfg.blocks_per_module,
                    cfg.layers_per_block,
                    &clip_geom,
                    &mut stream,
                )
            })
            .collect();

        let mut recon = root.child("recon");
        let recon_block = MrstbWeights::init(c, cfg.layers_per_block, &frame_geom, &mut recon);
        let up_out = if cfg.scale == 1 { 16 * c } else { 16 * 3 };
        let conv_up_w = recon.trunc_normal_tensor(vec![3, 3, c, up_out], 0.02);
        let conv_up_b = Tensor::zeros(vec![up_out]);
        let conv_out = (cfg.scale == 1)
            .then(|| (recon.trunc_normal_tensor(vec![3, 3, c, 3], 0.02), Tensor::zeros(vec![3])));

        ModelWeights {
            conv_in_w,
            conv_in_b,
            down,
            shallow_block,
            modules,
            recon_block,
            conv_up_w,
            conv_up_b,
            conv_out,
        }
    }

    /// Named parameters in canonical (registration) order.
    pub fn entries(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("shallow.conv_in.weight".into(), &self.conv_in_w),
            ("shallow.conv_in.bias".into(), &self.conv_in_b),
        ];
        if let Some(down) = &self.down {
            for (i, (w, b)) in down.iter().enumerate() {
                out.push((format!("shallow.down{}.weight", i + 1), w));
                out.push((format!("shallow.down{}.bias", i + 1), b));
            }
        }
        for (name, t) in self.shallow_block.entries() {
            out.push((format!("shallow.block.{name}"), t));
        }
        for (mi, module) in self.modules.iter().enumerate() {
            for (name, t) in module.entries() {
                out.push((format!("module{}.{name}", mi + 1), t));
            }
        }
        for (name, t) in self.recon_block.entries() {
            out.push((format!("recon.block.{name}"), t));
        }
        out.push(("recon.conv_up.weight".into(), &self.conv_up_w));
        out.push(("recon.conv_up.bias".into(), &self.conv_up_b));
        if let Some((w, b)) = &self.conv_out {
            out.push(("recon.conv_out.weight".into(), w));
            out.push(("recon.conv_out.bias".into(), b));
        }
        out
    }

    /// Visit parameters mutably in exactly the [`entries`] order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        f(&mut self.conv_in_w);
        f(&mut self.conv_in_b);
        if let Some(down) = &mut self.down {
            for (w, b) in down.iter_mut() {
                f(w);
                f(b);
            }
        }
        visit_mrstb(&mut self.shallow_block, f);
        for module in &mut self.modules {
            let g = &mut module.gda;
            f(&mut g.p_q);
            f(&mut g.p_k);
            f(&mut g.p_v);
            f(&mut g.off_w1);
            f(&mut g.off_b1);
            f(&mut g.off_w2);
            f(&mut g.off_b2);
            f(&mut g.off_w3);
            f(&mut g.off_b3);
            f(&mut g.mlp_w1);
            f(&mut g.mlp_w2);
            f(&mut module.fusion_w);
            f(&mut module.fusion_b);
            for block in &mut module.blocks {
                visit_mrstb(block, f);
            }
        }
        visit_mrstb(&mut self.recon_block, f);
        f(&mut self.conv_up_w);
        f(&mut self.conv_up_b);
        if let Some((w, b)) = &mut self.conv_out {
            f(w);
            f(b);
        }
    }

    fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        let conv_in_w = tape.leaf(self.conv_in_w.clone());
        let conv_in_b = tape.leaf(self.conv_in_b.clone());
        let down = self.down.as_ref().map(|d| {
            [
                (tape.leaf(d[0].0.clone()), tape.leaf(d[0].1.clone())),
                (tape.leaf(d[1].0.clone()), tape.leaf(d[1].1.clone())),
            ]
        });
        let shallow_block = self.shallow_block.register(tape);
        let modules = self.modules.iter().map(|m| m.register(tape)).collect();
        let recon_block = self.recon_block.register(tape);
        let conv_up_w = tape.leaf(self.conv_up_w.clone());
        let conv_up_b = tape.leaf(self.conv_up_b.clone());
        let conv_out = self.conv_out.as_ref().map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())));
        ModelVars {
            conv_in_w,
            conv_in_b,
            down,
            shallow_block,
            modules,
            recon_block,
            conv_up_w,
            conv_up_b,
            conv_out,
        }
    }
}

fn visit_mrstb<T: Scalar>(b: &mut MrstbWeights<T>, f: &mut impl FnMut(&mut Tensor<T>)) {
    for layer in &mut b.layers {
        f(&mut layer.ln1_g);
        f(&mut layer.ln1_b);
        f(&mut layer.qkv_w);
        f(&mut layer.qkv_b);
        f(&mut layer.proj_w);
        f(&mut layer.proj_b);
        f(&mut layer.rel_bias);
        f(&mut layer.ln2_g);
        f(&mut layer.ln2_b);
        f(&mut layer.mlp_w1);
        f(&mut layer.mlp_b1);
        f(&mut layer.mlp_w2);
        f(&mut layer.mlp_b2);
    }
    f(&mut b.conv_w);
    f(&mut b.conv_b);
    f(&mut b.res_scale);
}

struct ModelVars {
    conv_in_w: Var,
    conv_in_b: Var,
    down: Option<[(Var, Var); 2]>,
    shallow_block: MrstbVars,
    modules: Vec<RfrModuleVars>,
    recon_block: MrstbVars,
    conv_up_w: Var,
    conv_up_b: Var,
    conv_out: Option<(Var, Var)>,
}

/// A built model: configuration plus parameters at precision `T`.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub weights: ModelWeights<T>,
}

/// Everything a finished forward build exposes.
pub struct ForwardBuild<T: Scalar> {
    pub tape: Tape<T>,
    /// Cropped restored video, `[T, sH, sW, 3]`.
    pub output: Var,
    /// `(name, var)` per parameter, in canonical order.
    pub params: Vec<(String, Var)>,
    /// GDA internals per alignment site, for offset/attention export.
    pub gda_sites: Vec<GdaDiagSite>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from the config seed.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = ModelWeights::init(&cfg);
        Ok(Model { cfg, weights })
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor<T>)> {
        self.weights.entries()
    }

    /// Construct the full forward computation on a fresh tape.
    pub fn build_forward(&self, lq: &Tensor<T>, provider: &FlowProvider) -> Result<ForwardBuild<T>> {
        let s = lq.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape(format!("input video must be [T, H, W, 3], got {s:?}")));
        }
        let (t_real, h_in, w_in) = (s[0], s[1], s[2]);
        if t_real == 0 || h_in == 0 || w_in == 0 {
            return Err(Error::Invalid("empty video rejected".into()));
        }
        if !lq.is_finite() {
            return Err(Error::Invalid("input video contains non-finite values".into()));
        }
        let cfg = &self.cfg;
        let n = cfg.clip_size;
        let num_clips = t_real.div_ceil(n);
        let padded_t = num_clips * n;
        let (hf, wf) = cfg.feature_dims(h_in, w_in);
        if provider.frames() != t_real {
            return Err(Error::Invalid(format!(
                "flow provider covers {} frames, video has {t_real}",
                provider.frames()
            )));
        }
        let (cons_f, cons_b) = if num_clips > 1 {
            let f: Tensor<T> = provider.consecutive_flows(Direction::Forward)?;
            let b: Tensor<T> = provider.consecutive_flows(Direction::Backward)?;
            for (which, flows) in [("forward", &f), ("backward", &b)] {
                let fs = flows.shape();
                if fs[1] != hf || fs[2] != wf {
                    return Err(Error::shape(format!(
                        "{which} flows are {}x{}, features are {hf}x{wf}",
                        fs[1], fs[2]
                    )));
                }
            }
            (Some(extend_consecutive(&f, padded_t)), Some(extend_consecutive(&b, padded_t)))
        } else {
            (None, None)
        };

        let (hp, wp) = cfg.padded_input_dims(h_in, w_in);
        let padded = pad_video_reflect(lq, hp, wp);

        let mut tape = Tape::<T>::new();
        let mut cache = IdxCache::new();
        let mut masks = MaskCache::new();
        let vars = self.weights.register(&mut tape);
        let params: Vec<(String, Var)> = {
            // Leaves were pushed in entries order starting at node 0.
            let names = self.weights.entries();
            assert_eq!(tape.num_nodes(), names.len(), "registration order drifted");
            names
                .into_iter()
                .enumerate()
                .map(|(i, (name, _))| (name, var_at(i)))
                .collect()
        };

        let x = tape.leaf(padded.clone());

        // Shallow feature extraction.
        let mut f = tape.conv2d(x, vars.conv_in_w, 1, 1);
        f = tape.bias_add(f, vars.conv_in_b);
        if let Some(down) = &vars.down {
            for (w, b) in down {
                f = tape.conv2d(f, *w, 2, 1);
                f = tape.bias_add(f, *b);
                f = tape.relu(f);
            }
        }
        let frame_geom = cfg.frame_geom();
        f = build_mrstb(&mut tape, &mut cache, &mut masks, f, &vars.shallow_block, &frame_geom);

        // Clip partition on the tape (reflection-padded tail).
        let c = cfg.channels;
        let clips0: Vec<Var> = (0..num_clips)
            .map(|ci| {
                if (ci + 1) * n <= t_real {
                    tape.slice_axis0(f, ci * n, n)
                } else {
                    let frames: Vec<Var> = (0..n)
                        .map(|fi| {
                            let g = ci * n + fi;
                            let src = if g < t_real {
                                g
                            } else if t_real == 1 {
                                0
                            } else {
                                t_real - 1 - ((g - t_real) % t_real)
                            };
                            tape.slice_axis0(f, src, 1)
                        })
                        .collect();
                    tape.concat_axis(&frames, 0)
                }
            })
            .collect();

        // Pairwise flow chains per direction, refined module by module.
        let gda_cfg = cfg.gda_config();
        let mut fwd_flows: Vec<Var> = Vec::new();
        let mut bwd_flows: Vec<Var> = Vec::new();
        if num_clips > 1 {
            let cons_f = cons_f.as_ref().unwrap();
            let cons_b = cons_b.as_ref().unwrap();
            for j in 0..num_clips - 1 {
                let pf = clip_pairwise_flows(cons_f, n, j + 1, Direction::Forward)?;
                fwd_flows.push(tape.leaf(pf.into_tensor()));
                let pb = clip_pairwise_flows(cons_b, n, j, Direction::Backward)?;
                bwd_flows.push(tape.leaf(pb.into_tensor()));
            }
        }

        // Recurrent refinement.
        let clip_geom = cfg.clip_geom();
        let mut history: Vec<Vec<Var>> = vec![clips0];
        let mut gda_sites = Vec::new();
        for (mi, module_vars) in vars.modules.iter().enumerate() {
            let module_index = mi + 1;
            let flows = if module_index % 2 == 1 { &mut fwd_flows } else { &mut bwd_flows };
            let built = build_propagate(
                &mut tape,
                &mut cache,
                &mut masks,
                &gda_cfg,
                module_vars,
                &history,
                flows,
                module_index,
                &clip_geom,
            );
            gda_sites.extend(built.gda_sites);
            history.push(built.feats);
        }

        // Reassemble the refined video and reconstruct.
        let last = history.last().unwrap();
        let video = tape.concat_axis(last, 0);
        let video = tape.slice_axis0(video, 0, t_real);
        let y = build_mrstb(&mut tape, &mut cache, &mut masks, video, &vars.recon_block, &frame_geom);
        let up = tape.conv2d(y, vars.conv_up_w, 1, 1);
        let up = tape.bias_add(up, vars.conv_up_b);
        let up = tape.pixel_shuffle(up, 4);

        let full = if cfg.scale == 4 {
            // Bicubic x4 skip from the input.
            let mut skip_data = Vec::with_capacity(t_real * 4 * hp * 4 * wp * 3);
            for fi in 0..t_real {
                let frame = Tensor::new(
                    vec![hp, wp, 3],
                    padded.data()[fi * hp * wp * 3..(fi + 1) * hp * wp * 3].to_vec(),
                );
                skip_data.extend(kernel::resize_bicubic(&frame, 4 * hp, 4 * wp)?.into_data());
            }
            let skip = tape.leaf(Tensor::new(vec![t_real, 4 * hp, 4 * wp, 3], skip_data));
            tape.add(up, skip)
        } else {
            let (ow, ob) = vars.conv_out.expect("scale-1 weights present");
            let out3 = tape.conv2d(up, ow, 1, 1);
            let out3 = tape.bias_add(out3, ob);
            let inp = tape.slice_axis0(x, 0, t_real);
            tape.add(out3, inp)
        };

        // Crop the padding away.
        let (oh, ow_) = (cfg.scale * h_in, cfg.scale * w_in);
        let (fh, fw) = (cfg.scale * hp, cfg.scale * wp);
        let output = if (fh, fw) != (oh, ow_) {
            let idx = cache.get_or(format!("model.crop.{t_real}.{fh}.{fw}.3.{oh}.{ow_}"), || {
                let mut idx = Vec::with_capacity(t_real * oh * ow_ * 3);
                for fi in 0..t_real {
                    for y in 0..oh {
                        for xx in 0..ow_ {
                            let base = ((fi * fh + y) * fw + xx) * 3;
                            idx.extend([base as u32, base as u32 + 1, base as u32 + 2]);
                        }
                    }
                }
                idx
            });
            tape.gather(full, idx, vec![t_real, oh, ow_, 3])
        } else {
            full
        };

        Ok(ForwardBuild { tape, output, params, gda_sites })
    }

    /// Restore a video. Output is `[T, sH, sW, 3]`.
    pub fn forward(&self, lq: &Tensor<T>, provider: &FlowProvider) -> Result<Tensor<T>> {
        let build = self.build_forward(lq, provider)?;
        Ok(build.tape.val(build.output).clone())
    }

    /// Parameter totals per top-level sub-module plus the grand total.
    pub fn param_count(&self) -> ParamBreakdown {
        let mut parts: Vec<(String, u64)> = Vec::new();
        for (name, t) in self.weights.entries() {
            let top = name.split('.').next().unwrap_or("other").to_string();
            match parts.iter_mut().find(|(n, _)| *n == top) {
                Some((_, c)) => *c += t.numel() as u64,
                None => parts.push((top, t.numel() as u64)),
            }
        }
        let total = parts.iter().map(|(_, c)| c).sum();
        ParamBreakdown { parts, total }
    }

    /// Measured projection + MLP parameters of one module's GDA unit.
    pub fn gda_projection_mlp_params(&self, module_index: usize) -> u64 {
        self.weights.modules[module_index - 1].gda.projection_mlp_param_count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor<T>)> =
            self.weights.entries().into_iter().map(|(n, t)| (n, t.clone())).collect();
        io::write_weights(path, &self.cfg.hash(), &entries)
    }

    /// Load weights saved for exactly this config (hash-checked).
    pub fn load(path: &Path, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (hash, entries) = io::read_weights::<T>(path)?;
        if hash != cfg.hash() {
            return Err(Error::config(format!(
                "weight store config hash does not match the target config ({})",
                path.display()
            )));
        }
        let mut model = Model::build(cfg)?;
        let expected = model.weights.entries().len();
        if entries.len() != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!("weight store has {} entries, model needs {expected}", entries.len()),
            });
        }
        {
            let names: Vec<String> = model.weights.entries().iter().map(|(n, _)| n.clone()).collect();
            let mut it = entries.into_iter();
            let mut idx = 0;
            let mut err: Option<Error> = None;
            model.weights.visit_mut(&mut |slot| {
                if err.is_some() {
                    return;
                }
                let (name, tensor) = it.next().expect("entry count checked");
                if name != names[idx] {
                    err = Some(Error::Format {
                        offset: 0,
                        msg: format!("entry {idx} is '{name}', expected '{}'", names[idx]),
                    });
                    return;
                }
                if tensor.shape() != slot.shape() {
                    err = Some(Error::Format {
                        offset: 0,
                        msg: format!(
                            "entry '{name}' has shape {:?}, expected {:?}",
                            tensor.shape(),
                            slot.shape()
                        ),
                    });
                    return;
                }
                *slot = tensor;
                idx += 1;
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(model)
    }
}

fn var_at(i: usize) -> Var {
    // Leaves occupy the first node slots in registration order; the
    // assertion at the call site pins this.
    Var::from_index(i)
}

/// Extend frame-consecutive flows with zero hops up to `padded_t` frames.
/// The first reflected tail frame copies the last real frame, so a zero
/// hop is exact there; deeper tail frames only feed masked outputs.
fn extend_consecutive<T: Scalar>(cons: &Tensor<T>, padded_t: usize) -> Tensor<T> {
    let s = cons.shape();
    let (steps, h, w) = (s[0], s[1], s[2]);
    if steps + 1 >= padded_t {
        return cons.clone();
    }
    let mut data = cons.data().to_vec();
    data.extend(std::iter::repeat(T::zero()).take((padded_t - 1 - steps) * h * w * 2));
    Tensor::new(vec![padded_t - 1, h, w, 2], data)
}

/// Reflection-pad a video spatially (edge-inclusive symmetric).
pub fn pad_video_reflect<T: Scalar>(video: &Tensor<T>, hp: usize, wp: usize) -> Tensor<T> {
    let s = video.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h == hp && w == wp {
        return video.clone();
    }
    let reflect = |i: usize, len: usize| -> usize {
        if i < len {
            i
        } else if len == 1 {
            0
        } else {
            len - 1 - ((i - len) % len)
        }
    };
    let mut data = Vec::with_capacity(t * hp * wp * c);
    for fi in 0..t {
        for y in 0..hp {
            let sy = reflect(y, h);
            for x in 0..wp {
                let sx = reflect(x, w);
                let base = ((fi * h + sy) * w + sx) * c;
                data.extend_from_slice(&video.data()[base..base + c]);
            }
        }
    }
    Tensor::new(vec![t, hp, wp, c], data)
}

#[derive(Debug, Clone)]
pub struct ParamBreakdown {
    pub parts: Vec<(String, u64)>,
    pub total: u64,
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adam with the standard defaults.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// One update; `step` is 1-based for bias correction.
    pub fn update<T: Scalar>(
        &self,
        step: usize,
        lr: f64,
        w: &mut Tensor<T>,
        g: &Tensor<T>,
        m: &mut Tensor<T>,
        v: &mut Tensor<T>,
    ) {
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(step as i32));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for ((wv, &gv), (mv, vv)) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *wv = *wv - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Cosine-annealed learning rate: `lr_init` at step 0, `lr_min` at
/// `total_steps`.
pub fn cosine_lr(lr_init: f64, lr_min: f64, total_steps: usize, step: usize) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Optimizer state across training steps.
pub struct TrainState<T: Scalar> {
    pub step: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub adam: Adam,
    moments: Option<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(lr_init: f64, lr_min: f64, total_steps: usize) -> Self {
        TrainState { step: 0, lr_init, lr_min, total_steps, adam: Adam::default(), moments: None }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.lr_init, self.lr_min, self.total_steps, self.step)
    }
}

/// One optimization step on a `(lq, hq)` pair with the mean Charbonnier
/// loss. Returns the loss before the update. Non-finite losses or
/// gradients abort with a diagnostic.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    lq: &Tensor<T>,
    hq: &Tensor<T>,
    provider: &FlowProvider,
    state: &mut TrainState<T>,
) -> Result<f64> {
    let mut build = model.build_forward(lq, provider)?;
    if build.tape.val(build.output).shape() != hq.shape() {
        return Err(Error::shape(format!(
            "target shape {:?} does not match output {:?}",
            hq.shape(),
            build.tape.val(build.output).shape()
        )));
    }
    let target = build.tape.leaf(hq.clone());
    let eps = T::from_f64(kernel::CHARBONNIER_EPS);
    let loss_var = build.tape.charbonnier_mean(build.output, target, eps);
    let loss = build.tape.val(loss_var).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "loss".into(), step: state.step });
    }
    let grads = build.tape.backward(loss_var);

    // Collect gradients in canonical parameter order.
    let mut gvec: Vec<Tensor<T>> = Vec::with_capacity(build.params.len());
    for (name, var) in &build.params {
        let g = grads.get_or_zeros(*var, build.tape.val(*var).shape());
        if !g.is_finite() {
            return Err(Error::NonFinite { what: format!("gradient of {name}"), step: state.step });
        }
        gvec.push(g);
    }

    if state.moments.is_none() {
        state.moments = Some(
            gvec.iter()
                .map(|g| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())))
                .collect(),
        );
    }
    let lr = state.current_lr();
    let adam = state.adam;
    let step1 = state.step + 1;
    let moments = state.moments.as_mut().unwrap();
    let mut i = 0;
    model.weights.visit_mut(&mut |w| {
        let (m, v) = &mut moments[i];
        adam.update(step1, lr, w, &gvec[i], m, v);
        i += 1;
    });
    state.step += 1;
    Ok(loss)
}
