//! Exact parameter and multiply-accumulate accounting.
//!
//! Costs are derived from layer shapes alone:
//!
//! * convolution: `out_positions · k² · (c_in/g) · c_out`
//! * dense layer: `tokens · c_in · c_out`
//! * attention products: `N · t_q · t_kv · d` each for `QKᵀ` and `AV`
//!
//! Norms, activations, softmax, pooling and bias additions are not counted,
//! and one MAC is reported as one FLOP. [`verify_counter`] checks these
//! formulas against the multiplies a real forward pass executes.

use std::fmt::Write as _;

use crate::attention::KvReduction;
use crate::backbone::PvtModel;
use crate::config::{AttentionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::macs;
use crate::nn::Conv2dParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub input_size: (usize, usize),
}

impl CostReport {
    /// MACs of the `QKᵀ` and `AV` products over all blocks.
    pub fn attention_core_macs(&self) -> u64 {
        self.macs_where(|p| p.ends_with(".attn.core"))
    }

    /// MACs of every attention sublayer: projections, reduction and products.
    pub fn attention_macs(&self) -> u64 {
        self.macs_where(|p| p.contains(".attn."))
    }

    pub fn macs_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.per_layer.iter().filter(|l| pred(&l.path)).map(|l| l.macs).sum()
    }

    pub fn layer(&self, path: &str) -> Option<&LayerCost> {
        self.per_layer.iter().find(|l| l.path == path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs\n");
        for l in &self.per_layer {
            let _ = writeln!(out, "{},{},{}", l.path, l.params, l.macs);
        }
        let _ = writeln!(out, "TOTAL,{},{}", self.total_params, self.total_macs);
        out
    }

    pub fn render_text(&self) -> String {
        let width = self.per_layer.iter().map(|l| l.path.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "input {}x{}", self.input_size.0, self.input_size.1);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>15}", "layer", "params", "macs");
        for l in &self.per_layer {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>15}", l.path, l.params, l.macs);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>15}",
            "TOTAL", self.total_params, self.total_macs
        );
        let _ = writeln!(
            out,
            "params {:.2} M, GFLOPs (MACs) {:.3} G",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        out
    }
}

/// Walks the layers of a config in parameter-visiting order. With no input
/// size, only parameter counts are produced.
struct Walker {
    size: Option<(usize, usize)>,
    layers: Vec<LayerCost>,
}

impl Walker {
    fn push(&mut self, path: String, params: u64, macs: u64) {
        self.layers.push(LayerCost { path, params, macs });
    }

    fn norm(&mut self, path: String, c: usize) {
        self.push(path, 2 * c as u64, 0);
    }

    fn dense(&mut self, path: String, c_in: usize, c_out: usize, tokens: usize) {
        let macs = if self.size.is_some() {
            (tokens * c_in * c_out) as u64
        } else {
            0
        };
        self.push(path, (c_in * c_out + c_out) as u64, macs);
    }

    fn conv(&mut self, path: String, p: &Conv2dParams, positions: usize) {
        let macs = if self.size.is_some() {
            (positions * p.kernel * p.kernel * (p.in_channels / p.groups) * p.out_channels) as u64
        } else {
            0
        };
        self.push(path, p.param_count(), macs);
    }

    fn run(mut self, cfg: &ModelConfig) -> Result<Vec<LayerCost>> {
        cfg.validate()?;
        let (mut h, mut w) = self.size.unwrap_or((1, 1));
        let mut c_in = cfg.in_channels;
        for (i, sc) in cfg.stages.iter().enumerate() {
            let stage = format!("stage{}", i + 1);
            let c = sc.channels;
            let pe = if cfg.overlapping_patch_embed {
                Conv2dParams::overlapping_patch(c_in, c, sc.stride)?
            } else {
                Conv2dParams::plain_patch(c_in, c, sc.stride)?
            };
            if self.size.is_some() {
                let (Some(oh), Some(ow)) = (pe.output_extent(h), pe.output_extent(w)) else {
                    return Err(Error::shape(format!(
                        "{stage}: {h}x{w} input too small for patch kernel {}",
                        pe.kernel
                    )));
                };
                (h, w) = (oh, ow);
            }
            let t = h * w;
            self.conv(format!("{stage}.patch_embed.proj"), &pe, t);
            self.norm(format!("{stage}.patch_embed.norm"), c);
            for j in 0..sc.depth {
                let block = format!("{stage}.block{j}");
                let attn = format!("{block}.attn");
                self.norm(format!("{block}.norm1"), c);
                let t_kv = match sc.attn {
                    AttentionKind::Sra { reduction_ratio: 1 } => t,
                    AttentionKind::Sra { reduction_ratio: r } => {
                        if self.size.is_some() && (h % r != 0 || w % r != 0) {
                            return Err(Error::shape(format!(
                                "{attn}: {h}x{w} map is not divisible by reduction ratio {r}"
                            )));
                        }
                        (h / r) * (w / r)
                    }
                    AttentionKind::LinearSra { pool_size } => pool_size * pool_size,
                };
                self.dense(format!("{attn}.q"), c, c, t);
                self.dense(format!("{attn}.k"), c, c, t_kv);
                self.dense(format!("{attn}.v"), c, c, t_kv);
                self.dense(format!("{attn}.proj"), c, c, t);
                match sc.attn {
                    AttentionKind::Sra { reduction_ratio: 1 } => {}
                    AttentionKind::Sra { reduction_ratio: r } => {
                        self.conv(format!("{attn}.sr"), &Conv2dParams::new(c, c, r, r, 0, 1)?, t_kv);
                        self.norm(format!("{attn}.norm"), c);
                    }
                    AttentionKind::LinearSra { .. } => {
                        if cfg.pool_refine {
                            self.conv(format!("{attn}.sr"), &Conv2dParams::new(c, c, 1, 1, 0, 1)?, t_kv);
                            self.norm(format!("{attn}.norm"), c);
                        }
                    }
                }
                let core = if self.size.is_some() {
                    // N heads · t_q · t_kv · d, twice, with N·d = c
                    2 * (t * t_kv * c) as u64
                } else {
                    0
                };
                self.push(format!("{attn}.core"), 0, core);
                self.norm(format!("{block}.norm2"), c);
                let hidden = sc.hidden();
                self.dense(format!("{block}.ffn.fc1"), c, hidden, t);
                if cfg.conv_ffn {
                    self.conv(format!("{block}.ffn.dwconv"), &Conv2dParams::depthwise3x3(hidden)?, t);
                }
                self.dense(format!("{block}.ffn.fc2"), hidden, c, t);
            }
            self.norm(format!("{stage}.norm"), c);
            c_in = c;
        }
        self.dense("head".into(), c_in, cfg.num_classes, 1);
        Ok(self.layers)
    }
}

/// Per-layer parameter counts, in weight-file order.
pub fn param_layers(cfg: &ModelConfig) -> Result<Vec<LayerCost>> {
    Walker {
        size: None,
        layers: Vec::new(),
    }
    .run(cfg)
}

/// Total parameters, classification head included.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(param_layers(cfg)?.iter().map(|l| l.params).sum())
}

/// Full cost breakdown for one `h×w` input image (batch size 1).
pub fn cost_report(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    if h == 0 || w == 0 {
        return Err(Error::shape("input size must be positive"));
    }
    let per_layer = Walker {
        size: Some((h, w)),
        layers: Vec::new(),
    }
    .run(cfg)?;
    Ok(CostReport {
        total_params: per_layer.iter().map(|l| l.params).sum(),
        total_macs: per_layer.iter().map(|l| l.macs).sum(),
        per_layer,
        input_size: (h, w),
    })
}

pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    Ok(cost_report(cfg, h, w)?.total_macs)
}

/// Attention cost as written for SRA: `2h²w²c/R² + hwc²R²`.
pub fn sra_complexity(h: usize, w: usize, c: usize, r: usize) -> f64 {
    let (h, w, c, r) = (h as f64, w as f64, c as f64, r as f64);
    2.0 * h * h * w * w * c / (r * r) + h * w * c * c * r * r
}

/// Attention cost as written for linear SRA: `2hwP²c`.
pub fn linear_sra_complexity(h: usize, w: usize, c: usize, p: usize) -> f64 {
    2.0 * (h * w * p * p * c) as f64
}

/// The closed form's two SRA terms next to what the reduction convolution
/// actually costs (`(h/R)(w/R)` positions × `R²c²`, i.e. `hwc²`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SraTerms {
    pub attention: f64,
    pub reduction_stated: f64,
    pub reduction_counted: u64,
}

pub fn sra_terms(h: usize, w: usize, c: usize, r: usize) -> SraTerms {
    let (hf, wf, cf, rf) = (h as f64, w as f64, c as f64, r as f64);
    SraTerms {
        attention: 2.0 * hf * hf * wf * wf * cf / (rf * rf),
        reduction_stated: hf * wf * cf * cf * rf * rf,
        reduction_counted: ((h / r) * (w / r) * r * r * c * c) as u64,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub size: (usize, usize),
    pub total_macs: u64,
    pub attention_core_macs: u64,
    pub attention_macs: u64,
}

/// MAC totals at several input sizes, in the order given.
pub fn sweep_macs(cfg: &ModelConfig, sizes: &[(usize, usize)]) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::config("sweep needs at least one input size"));
    }
    sizes
        .iter()
        .map(|&(h, w)| {
            let r = cost_report(cfg, h, w)?;
            Ok(SweepRow {
                size: (h, w),
                total_macs: r.total_macs,
                attention_core_macs: r.attention_core_macs(),
                attention_macs: r.attention_macs(),
            })
        })
        .collect()
}

/// Largest analytic cost [`verify_counter`] will execute.
pub const VERIFY_MAC_LIMIT: u64 = 100_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Discrepancy {
    pub layer: String,
    pub analytic: u64,
    pub instrumented: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterCheck {
    pub analytic: u64,
    pub instrumented: u64,
    pub discrepancies: Vec<Discrepancy>,
}

impl CounterCheck {
    pub fn is_exact(&self) -> bool {
        self.analytic == self.instrumented && self.discrepancies.is_empty()
    }
}

/// Runs one instrumented forward pass on a seeded `1×3×h×w` image and
/// compares the executed multiplies with [`cost_report`], layer by layer.
pub fn verify_counter<T: Scalar>(model: &PvtModel<T>, h: usize, w: usize, seed: u64) -> Result<CounterCheck> {
    let report = cost_report(&model.config, h, w)?;
    if report.total_macs > VERIFY_MAC_LIMIT {
        return Err(Error::config(format!(
            "{} MACs exceeds the instrumented-pass limit of {VERIFY_MAC_LIMIT}",
            report.total_macs
        )));
    }
    let image = Tensor::<T>::rand_uniform(&[1, model.config.in_channels, h, w], seed, -1.0, 1.0)?;
    let (logits, tally) = macs::instrument(|| model.classify(&image));
    logits?;
    let mut discrepancies = Vec::new();
    for layer in &report.per_layer {
        let got = tally.get(&layer.path);
        if got != layer.macs {
            discrepancies.push(Discrepancy {
                layer: layer.path.clone(),
                analytic: layer.macs,
                instrumented: got,
            });
        }
    }
    for (path, n) in &tally.per_layer {
        if report.layer(path).is_none() {
            discrepancies.push(Discrepancy {
                layer: path.clone(),
                analytic: 0,
                instrumented: *n,
            });
        }
    }
    Ok(CounterCheck {
        analytic: report.total_macs,
        instrumented: tally.total(),
        discrepancies,
    })
}

/// Parameter count of a constructed attention layer's reduction path.
pub fn reduction_params<T: Scalar>(reduction: &KvReduction<T>) -> u64 {
    use crate::nn::Module;
    match reduction {
        KvReduction::None | KvReduction::Pool { refine: None, .. } => 0,
        KvReduction::Conv { conv, norm, .. }
        | KvReduction::Pool {
            refine: Some((conv, norm)),
            ..
        } => conv.param_count() + norm.param_count(),
    }
}
