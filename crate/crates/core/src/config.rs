//! Flat `key = value` experiment configuration. Unknown keys are rejected
//! with the offending line number, `#` starts a comment.

use crate::dataset::SyntheticSpec;
use crate::error::{CtxError, Result};
use crate::featmap::FeatMapConfig;
use crate::graph::RelationSpec;
use crate::infer::{RefineParams, MEAN_FIELD_DEFAULT_ITERS};
use crate::potentials::PotentialNetsConfig;
use crate::train::TrainConfig;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_image_size: usize,
    pub data_count: usize,
    pub data_noise_sigma: f64,
    pub data_seed: u64,

    pub featmap_scales: Vec<f64>,
    pub featmap_pool_windows: Vec<usize>,

    pub model_k: usize,
    pub model_unary_hidden: Vec<usize>,
    pub model_pairwise_hidden: Vec<usize>,
    /// Whether pairwise potentials exist at all (the unary-only ablation
    /// turns this off).
    pub model_pairwise: bool,
    pub model_box_ratio: f64,
    pub model_share_trunk: bool,
    pub model_seed: u64,

    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_momentum: f64,
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_seed: u64,
    pub train_augment: bool,
    pub train_scale_min: f64,
    pub train_scale_max: f64,
    pub train_flip: bool,

    pub infer_mean_field_iters: usize,

    pub refine_enabled: bool,
    pub refine_potts_weight: f64,
    pub refine_appearance_weight: f64,
    pub refine_spatial_sigma: f64,
    pub refine_color_sigma: f64,
    pub refine_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let r = RefineParams::default();
        ExperimentConfig {
            data_image_size: 64,
            data_count: 250,
            data_noise_sigma: 0.05,
            data_seed: 0,
            featmap_scales: vec![1.2, 0.8, 0.4],
            featmap_pool_windows: vec![5, 9],
            model_k: 5,
            model_unary_hidden: vec![32],
            model_pairwise_hidden: vec![32],
            model_pairwise: true,
            model_box_ratio: 0.4,
            model_share_trunk: false,
            model_seed: 0,
            train_lr: t.lr,
            train_weight_decay: t.weight_decay,
            train_momentum: t.momentum,
            train_epochs: t.epochs,
            train_batch_size: t.batch_size,
            train_seed: t.seed,
            train_augment: t.augment,
            train_scale_min: t.scale_range.0,
            train_scale_max: t.scale_range.1,
            train_flip: t.flip,
            infer_mean_field_iters: MEAN_FIELD_DEFAULT_ITERS,
            refine_enabled: true,
            refine_potts_weight: r.potts_weight,
            refine_appearance_weight: r.appearance_weight,
            refine_spatial_sigma: r.spatial_sigma,
            refine_color_sigma: r.color_sigma,
            refine_iterations: r.iterations,
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
    v.trim().parse().map_err(|_| CtxError::ConfigParse {
        line,
        detail: format!("cannot parse value `{}`", v.trim()),
    })
}

fn parse_list<T: std::str::FromStr>(v: &str, line: usize) -> Result<Vec<T>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|t| parse_scalar(t, line)).collect()
}

fn parse_bool(v: &str, line: usize) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CtxError::ConfigParse { line, detail: format!("expected true/false, got `{other}`") }),
    }
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CtxError::ConfigParse {
                line: lineno,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, v) = (key.trim(), value);
            match key {
                "data.image_size" => cfg.data_image_size = parse_scalar(v, lineno)?,
                "data.count" => cfg.data_count = parse_scalar(v, lineno)?,
                "data.noise_sigma" => cfg.data_noise_sigma = parse_scalar(v, lineno)?,
                "data.seed" => cfg.data_seed = parse_scalar(v, lineno)?,
                "featmap.scales" => cfg.featmap_scales = parse_list(v, lineno)?,
                "featmap.pool_windows" => cfg.featmap_pool_windows = parse_list(v, lineno)?,
                "model.k" => cfg.model_k = parse_scalar(v, lineno)?,
                "model.unary_hidden" => cfg.model_unary_hidden = parse_list(v, lineno)?,
                "model.pairwise_hidden" => cfg.model_pairwise_hidden = parse_list(v, lineno)?,
                "model.pairwise" => cfg.model_pairwise = parse_bool(v, lineno)?,
                "model.box_ratio" => cfg.model_box_ratio = parse_scalar(v, lineno)?,
                "model.share_trunk" => cfg.model_share_trunk = parse_bool(v, lineno)?,
                "model.seed" => cfg.model_seed = parse_scalar(v, lineno)?,
                "train.lr" => cfg.train_lr = parse_scalar(v, lineno)?,
                "train.weight_decay" => cfg.train_weight_decay = parse_scalar(v, lineno)?,
                "train.momentum" => cfg.train_momentum = parse_scalar(v, lineno)?,
                "train.epochs" => cfg.train_epochs = parse_scalar(v, lineno)?,
                "train.batch_size" => cfg.train_batch_size = parse_scalar(v, lineno)?,
                "train.seed" => cfg.train_seed = parse_scalar(v, lineno)?,
                "train.augment" => cfg.train_augment = parse_bool(v, lineno)?,
                "train.scale_min" => cfg.train_scale_min = parse_scalar(v, lineno)?,
                "train.scale_max" => cfg.train_scale_max = parse_scalar(v, lineno)?,
                "train.flip" => cfg.train_flip = parse_bool(v, lineno)?,
                "infer.mean_field_iters" => {
                    // iterations are counted; a signed parse catches negatives
                    let n: i64 = parse_scalar(v, lineno)?;
                    if n < 0 {
                        return Err(CtxError::ConfigParse {
                            line: lineno,
                            detail: format!("infer.mean_field_iters must be >= 0, got {n}"),
                        });
                    }
                    cfg.infer_mean_field_iters = n as usize;
                }
                "refine.enabled" => cfg.refine_enabled = parse_bool(v, lineno)?,
                "refine.potts_weight" => cfg.refine_potts_weight = parse_scalar(v, lineno)?,
                "refine.appearance_weight" => cfg.refine_appearance_weight = parse_scalar(v, lineno)?,
                "refine.spatial_sigma" => cfg.refine_spatial_sigma = parse_scalar(v, lineno)?,
                "refine.color_sigma" => cfg.refine_color_sigma = parse_scalar(v, lineno)?,
                "refine.iterations" => cfg.refine_iterations = parse_scalar(v, lineno)?,
                _ => {
                    return Err(CtxError::ConfigParse {
                        line: lineno,
                        detail: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec().validate()?;
        self.nets_config()?.validate()?;
        self.train_config().validate()?;
        if self.refine_enabled {
            self.refine_params().validate()?;
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c` and the checkpoint
    /// digest is taken over this.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "data.image_size = {}", self.data_image_size);
        let _ = writeln!(w, "data.count = {}", self.data_count);
        let _ = writeln!(w, "data.noise_sigma = {}", self.data_noise_sigma);
        let _ = writeln!(w, "data.seed = {}", self.data_seed);
        let _ = writeln!(w, "featmap.scales = {}", fmt_list(&self.featmap_scales));
        let _ = writeln!(w, "featmap.pool_windows = {}", fmt_list(&self.featmap_pool_windows));
        let _ = writeln!(w, "model.k = {}", self.model_k);
        let _ = writeln!(w, "model.unary_hidden = {}", fmt_list(&self.model_unary_hidden));
        let _ = writeln!(w, "model.pairwise_hidden = {}", fmt_list(&self.model_pairwise_hidden));
        let _ = writeln!(w, "model.pairwise = {}", self.model_pairwise);
        let _ = writeln!(w, "model.box_ratio = {}", self.model_box_ratio);
        let _ = writeln!(w, "model.share_trunk = {}", self.model_share_trunk);
        let _ = writeln!(w, "model.seed = {}", self.model_seed);
        let _ = writeln!(w, "train.lr = {}", self.train_lr);
        let _ = writeln!(w, "train.weight_decay = {}", self.train_weight_decay);
        let _ = writeln!(w, "train.momentum = {}", self.train_momentum);
        let _ = writeln!(w, "train.epochs = {}", self.train_epochs);
        let _ = writeln!(w, "train.batch_size = {}", self.train_batch_size);
        let _ = writeln!(w, "train.seed = {}", self.train_seed);
        let _ = writeln!(w, "train.augment = {}", self.train_augment);
        let _ = writeln!(w, "train.scale_min = {}", self.train_scale_min);
        let _ = writeln!(w, "train.scale_max = {}", self.train_scale_max);
        let _ = writeln!(w, "train.flip = {}", self.train_flip);
        let _ = writeln!(w, "infer.mean_field_iters = {}", self.infer_mean_field_iters);
        let _ = writeln!(w, "refine.enabled = {}", self.refine_enabled);
        let _ = writeln!(w, "refine.potts_weight = {}", self.refine_potts_weight);
        let _ = writeln!(w, "refine.appearance_weight = {}", self.refine_appearance_weight);
        let _ = writeln!(w, "refine.spatial_sigma = {}", self.refine_spatial_sigma);
        let _ = writeln!(w, "refine.color_sigma = {}", self.refine_color_sigma);
        let _ = writeln!(w, "refine.iterations = {}", self.refine_iterations);
        s
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.data_image_size,
            k: self.model_k,
            noise_sigma: self.data_noise_sigma,
            count: self.data_count,
            seed: self.data_seed,
        }
    }

    pub fn featmap_config(&self) -> FeatMapConfig {
        FeatMapConfig {
            scales: self.featmap_scales.clone(),
            pool_windows: self.featmap_pool_windows.clone(),
            ..FeatMapConfig::default()
        }
    }

    pub fn relations(&self) -> Vec<RelationSpec> {
        if !self.model_pairwise {
            return Vec::new();
        }
        vec![
            RelationSpec { box_ratio: self.model_box_ratio, ..RelationSpec::surround() },
            RelationSpec { box_ratio: self.model_box_ratio, ..RelationSpec::above_below() },
        ]
    }

    pub fn nets_config(&self) -> Result<PotentialNetsConfig> {
        Ok(PotentialNetsConfig {
            k: self.model_k,
            unary_hidden: self.model_unary_hidden.clone(),
            pairwise_hidden: self.model_pairwise_hidden.clone(),
            featmap: self.featmap_config(),
            relations: self.relations(),
            share_trunk: self.model_share_trunk,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train_lr,
            weight_decay: self.train_weight_decay,
            momentum: self.train_momentum,
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            seed: self.train_seed,
            augment: self.train_augment,
            scale_range: (self.train_scale_min, self.train_scale_max),
            flip: self.train_flip,
        }
    }

    pub fn refine_params(&self) -> RefineParams {
        if !self.refine_enabled {
            return RefineParams::disabled();
        }
        RefineParams {
            potts_weight: self.refine_potts_weight,
            appearance_weight: self.refine_appearance_weight,
            spatial_sigma: self.refine_spatial_sigma,
            color_sigma: self.refine_color_sigma,
            iterations: self.refine_iterations,
        }
    }

    /// Names of fields that differ between two configs, in canonical order.
    pub fn diff_keys(&self, other: &ExperimentConfig) -> Vec<String> {
        let a = self.to_text();
        let b = other.to_text();
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.split('=').next().unwrap().trim().to_string())
            .collect()
    }
}
