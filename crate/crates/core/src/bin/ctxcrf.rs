use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ctxcrf::ablate::run_ablation;
use ctxcrf::checkpoint::{load_nets, save_nets};
use ctxcrf::config::ExperimentConfig;
use ctxcrf::dataset::gen_dataset;
use ctxcrf::gradcheck::suites;
use ctxcrf::graph::{build_graph, RelationSpec};
use ctxcrf::imageio;
use ctxcrf::infer::{exact_marginals, mean_field, predict};
use ctxcrf::metrics::{compute_metrics, ConfusionMatrix};
use ctxcrf::potentials::{PotentialNets, PotentialTables};
use ctxcrf::train::{train, TrainSample, TrainScope};
use ctxcrf::{Real, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ctxcrf", about = "Contextual CRF semantic segmentation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic contextual dataset
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the potential networks on a generated dataset
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict label maps for a dataset split
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-class score maps
        #[arg(long)]
        scores: bool,
    },
    /// Compare a predicted label map against ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the 5-rung component ablation ladder
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suites over all primitives
    CheckGrad {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        num_seeds: u64,
    },
    /// Mean-field vs exact-enumeration marginal error sweeps
    OracleCompare {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::parse(&text)?)
        }
    }
}

fn read_split(dir: &Path, split: &str) -> Result<Vec<TrainSample<Real>>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("reading {}/manifest.txt", dir.display()))?;
    let mut samples = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            bail!("manifest line {}: expected `image mask split`, got `{line}`", i + 1);
        }
        if fields[2] != split {
            continue;
        }
        let image: Tensor<Real> = imageio::read_ppm(&dir.join(fields[0]))?;
        let mask = imageio::read_pgm(&dir.join(fields[1]))?;
        samples.push(TrainSample { image, mask });
    }
    if samples.is_empty() {
        bail!("no samples with split `{split}` in {}", dir.display());
    }
    Ok(samples)
}

fn cmd_gen_data(config: &Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    let (train_set, test_set) = gen_dataset::<Real>(&cfg.synthetic_spec())?;
    let mut manifest = String::new();
    let mut idx = 0usize;
    for (split, set) in [("train", &train_set), ("test", &test_set)] {
        for s in set.iter() {
            let img = format!("img_{idx:04}.ppm");
            let mask = format!("mask_{idx:04}.pgm");
            imageio::write_ppm(&out.join(&img), &s.image)?;
            imageio::write_pgm(&out.join(&mask), &s.mask)?;
            manifest.push_str(&format!("{img} {mask} {split}\n"));
            idx += 1;
        }
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    println!("wrote {} train / {} test samples to {}", train_set.len(), test_set.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Option<PathBuf>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    let samples = read_split(data, "train")?;
    let mut nets = PotentialNets::<Real>::new(cfg.nets_config()?, cfg.model_seed)?;
    let log = train(&samples, &mut nets, &cfg.train_config(), TrainScope::All)?;
    if let Some(last) = log.epochs.last() {
        println!("final epoch {}: total loss {:.4}", last.epoch, last.total);
    }
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    fs::write(out.join("loss.csv"), csv)?;
    save_nets(&out.join("model.ckpt"), &nets, &cfg.to_text())?;
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_predict(
    config: &Option<PathBuf>,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    out: &Path,
    dump_scores: bool,
) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    let samples = read_split(data, split)?;
    let mut nets = PotentialNets::<Real>::new(cfg.nets_config()?, cfg.model_seed)?;
    load_nets(checkpoint, &mut nets, &cfg.to_text())?;
    let refine = cfg.refine_params();
    let mut cm = ConfusionMatrix::new(cfg.model_k);
    for (i, s) in samples.iter().enumerate() {
        let p = predict(&nets, &s.image, &refine, cfg.infer_mean_field_iters)?;
        imageio::write_pgm(&out.join(format!("pred_{i:04}.pgm")), &p.final_map)?;
        imageio::write_pgm_ascii(&out.join(format!("coarse_{i:04}.pgm")), &p.coarse)?;
        if dump_scores {
            imageio::write_scores(&out.join(format!("scores_{i:04}.bin")), &p.upsampled_scores)?;
        }
        cm.add(&p.final_map, &s.mask)?;
    }
    let mut csv = Vec::new();
    cm.report().write_csv(&mut csv)?;
    fs::write(out.join("metrics.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn cmd_eval(pred: &Path, truth: &Path, k: usize, out: &Option<PathBuf>) -> Result<()> {
    let p = imageio::read_pgm(pred)?;
    let t = imageio::read_pgm(truth)?;
    let report = compute_metrics(&p, &t, k)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    match out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(())
}

fn cmd_ablate(config: &Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    let result = run_ablation::<Real>(&cfg, |msg| eprintln!("{msg}"))?;
    for rung in &result.rungs {
        let mut csv = Vec::new();
        rung.train_log.write_csv(&mut csv)?;
        fs::write(out.join(format!("loss_{}.csv", rung.name.replace('+', ""))), csv)?;
    }
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    fs::write(out.join("ablation.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn cmd_check_grad(seed: u64, num_seeds: u64) -> Result<()> {
    let seeds: Vec<u64> = (seed..seed + num_seeds).collect();
    let results = suites::run_all(&seeds)?;
    let mut ok = true;
    println!("suite,max_rel_err,threshold,status");
    for (name, err) in &results {
        let pass = *err < suites::TOLERANCE;
        ok &= pass;
        println!("{name},{err:.3e},{:.0e},{}", suites::TOLERANCE, if pass { "pass" } else { "FAIL" });
    }
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_oracle_compare(seed: u64, instances: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    println!("instance,nodes,k,pairwise_scale,max_abs_marginal_err");
    let scales = [1.0, 0.5, 0.1, 0.01];
    let mut worst_weak = 0.0f64;
    for inst in 0..instances {
        let (h, w) = ([1usize, 2, 3][rng.gen_range(0..3)], rng.gen_range(1..=3usize));
        let k = rng.gen_range(2..=3usize);
        let graph = build_graph(h, w, &[RelationSpec::surround(), RelationSpec::above_below()])?;
        let n = graph.num_nodes();
        let unary = Tensor::new(
            vec![n, k],
            (0..n * k).map(|_| rng.gen_range(-1.0f64..1.0)).collect(),
        )?;
        let base: Vec<(String, Tensor<f64>)> = graph
            .relations()
            .iter()
            .map(|es| {
                let e = es.edges.len().max(1);
                (
                    es.spec.name.clone(),
                    Tensor::new(vec![e, k, k], (0..e * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap(),
                )
            })
            .collect();
        for &scale in &scales {
            let tables = PotentialTables {
                k,
                unary: unary.clone(),
                pairwise: base
                    .iter()
                    .map(|(n, t)| (n.clone(), t.map(|v| v * scale)))
                    .collect(),
            };
            let exact = exact_marginals(&graph, &tables)?;
            let mf = mean_field(&graph, &tables, 50)?;
            let err = exact
                .q
                .data()
                .iter()
                .zip(mf.q.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            println!("{inst},{n},{k},{scale},{err:.3e}");
            if scale == 0.01 {
                worst_weak = worst_weak.max(err);
            }
        }
    }
    println!("# worst error at pairwise scale 0.01: {worst_weak:.3e}");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Predict { config, checkpoint, data, split, out, scores } => {
            cmd_predict(&config, &checkpoint, &data, &split, &out, scores)
        }
        Command::Eval { pred, truth, k, out } => cmd_eval(&pred, &truth, k, &out),
        Command::Ablate { config, out } => cmd_ablate(&config, &out),
        Command::CheckGrad { seed, num_seeds } => cmd_check_grad(seed, num_seeds),
        Command::OracleCompare { seed, instances } => cmd_oracle_compare(seed, instances),
    }
}
