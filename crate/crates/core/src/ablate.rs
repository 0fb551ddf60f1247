//! Component-ablation ladder: five configurations, each adding exactly one
//! component over the previous rung, evaluated on the synthetic contextual
//! dataset.
//!
//! Rungs: plain fully-convolutional baseline, +sliding pyramid pooling,
//! +multi-scale input, +dense-CRF boundary refinement, +pairwise potentials.
//! Rung 4 reuses rung 3's trained unary model (refinement is inference-only);
//! rung 5 reuses the same unary and trains only the pairwise nets on top.

use crate::config::ExperimentConfig;
use crate::dataset::gen_dataset;
use crate::error::{CtxError, Result};
use crate::infer::predict;
use crate::labels::LabelMap;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::potentials::PotentialNets;
use crate::scalar::Scalar;
use crate::train::{train, TrainLog, TrainSample, TrainScope};
use std::io::Write;

pub const RUNG_NAMES: [&str; 5] =
    ["baseline", "+pyramid", "+multiscale", "+refinement", "+pairwise"];

/// The five cumulative configurations derived from `base` (which must carry
/// all components enabled; the default config does).
pub fn ablation_configs(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    if !base.model_pairwise || !base.refine_enabled {
        return Err(CtxError::InvalidConfig(
            "ablation base config must have all components enabled".into(),
        ));
    }
    let mut baseline = base.clone();
    // keep the top pyramid scale so every rung shares one coarse grid and
    // the pyramid windows fit once they are switched on
    baseline.featmap_scales = vec![base.featmap_scales[0]];
    baseline.featmap_pool_windows = vec![];
    baseline.refine_enabled = false;
    baseline.model_pairwise = false;

    let mut pyramid = baseline.clone();
    pyramid.featmap_pool_windows = base.featmap_pool_windows.clone();
    let mut multiscale = pyramid.clone();
    multiscale.featmap_scales = base.featmap_scales.clone();
    let mut refinement = multiscale.clone();
    refinement.refine_enabled = true;
    let mut pairwise = refinement.clone();
    pairwise.model_pairwise = true;

    let rungs = [baseline, pyramid, multiscale, refinement, pairwise];
    // ladder invariant: consecutive rungs differ by exactly one field
    for (i, w) in rungs.windows(2).enumerate() {
        let diff = w[0].diff_keys(&w[1]);
        if diff.len() != 1 {
            return Err(CtxError::InvalidConfig(format!(
                "rungs {i} and {}: expected one differing field, got {diff:?}",
                i + 1
            )));
        }
    }
    Ok(RUNG_NAMES.iter().map(|n| n.to_string()).zip(rungs).collect())
}

#[derive(Clone, Debug)]
pub struct RungResult {
    pub name: String,
    pub config: ExperimentConfig,
    pub report: MetricsReport,
    pub train_log: TrainLog,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub rungs: Vec<RungResult>,
}

impl AblationResult {
    /// One row per rung, metrics as columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.rungs.first().map(|r| r.report.per_class_iou.len()).unwrap_or(0);
        write!(w, "rung,pixel_acc,mean_acc,mean_iou")?;
        for c in 0..k {
            write!(w, ",iou_class{c}")?;
        }
        writeln!(w)?;
        for r in &self.rungs {
            write!(
                w,
                "{},{:.6},{:.6},{:.6}",
                r.name, r.report.pixel_accuracy, r.report.mean_accuracy, r.report.iou
            )?;
            for v in &r.report.per_class_iou {
                match v {
                    Some(x) => write!(w, ",{x:.6}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn evaluate<T: Scalar>(
    nets: &PotentialNets<T>,
    cfg: &ExperimentConfig,
    test: &[TrainSample<T>],
) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(cfg.model_k);
    let refine = cfg.refine_params();
    for s in test {
        let pred = predict(nets, &s.image, &refine, cfg.infer_mean_field_iters)?;
        cm.add(&pred.final_map, &s.mask)?;
    }
    Ok(cm.report())
}

/// When refinement is off the prediction is still full-resolution (upsampled
/// argmax), so all rungs are scored on the same grid.
pub fn predict_label_map<T: Scalar>(
    nets: &PotentialNets<T>,
    cfg: &ExperimentConfig,
    image: &crate::tensor::Tensor<T>,
) -> Result<LabelMap> {
    Ok(predict(nets, image, &cfg.refine_params(), cfg.infer_mean_field_iters)?.final_map)
}

/// Runs the full ladder. `progress` receives one line per completed stage.
pub fn run_ablation<T: Scalar>(
    base: &ExperimentConfig,
    mut progress: impl FnMut(&str),
) -> Result<AblationResult> {
    base.validate()?;
    let configs = ablation_configs(base)?;
    let (train_set, test_set) = gen_dataset::<T>(&base.synthetic_spec())?;
    progress(&format!("dataset: {} train / {} test", train_set.len(), test_set.len()));

    let mut rungs: Vec<RungResult> = Vec::new();
    let mut multiscale_nets: Option<PotentialNets<T>> = None;
    for (i, (name, cfg)) in configs.into_iter().enumerate() {
        let (nets, log) = match i {
            // refinement changes inference only: reuse the +multiscale model
            3 => (multiscale_nets.clone().unwrap(), rungs[2].train_log.clone()),
            // pairwise rung: keep the trained unary, train pairwise nets only
            4 => {
                let mut nets = PotentialNets::<T>::new(cfg.nets_config()?, cfg.model_seed)?;
                nets.unary_store = multiscale_nets.as_ref().unwrap().unary_store.clone();
                let log =
                    train(&train_set, &mut nets, &cfg.train_config(), TrainScope::PairwiseOnly)?;
                (nets, log)
            }
            _ => {
                let mut nets = PotentialNets::<T>::new(cfg.nets_config()?, cfg.model_seed)?;
                let log = train(&train_set, &mut nets, &cfg.train_config(), TrainScope::All)?;
                (nets, log)
            }
        };
        if i == 2 {
            multiscale_nets = Some(nets.clone());
        }
        if let Some(last) = log.epochs.last() {
            progress(&format!("{name}: trained, final loss {:.4}", last.total));
        }
        let report = evaluate(&nets, &cfg, &test_set)?;
        progress(&format!("{name}: mean IoU {:.4}", report.iou));
        rungs.push(RungResult { name, config: cfg, report, train_log: log });
    }
    Ok(AblationResult { rungs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_structure() {
        let configs = ablation_configs(&ExperimentConfig::default()).unwrap();
        assert_eq!(configs.len(), 5);
        let names: Vec<&str> = configs.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, RUNG_NAMES);
        assert_eq!(configs[0].1.featmap_scales, vec![1.2]);
        assert!(configs[0].1.featmap_pool_windows.is_empty());
        assert_eq!(
            configs[0].1.diff_keys(&configs[1].1),
            vec!["featmap.pool_windows".to_string()]
        );
        assert_eq!(configs[3].1.diff_keys(&configs[4].1), vec!["model.pairwise".to_string()]);
        // last rung is the base config again
        assert_eq!(configs[4].1, ExperimentConfig::default());
    }

    #[test]
    fn crippled_base_rejected() {
        let mut base = ExperimentConfig::default();
        base.model_pairwise = false;
        assert!(ablation_configs(&base).is_err());
    }
}
