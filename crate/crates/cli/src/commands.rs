use std::path::Path;

use crystal_core::aggregation::DEFAULT_LAMBDA;
use crystal_core::config::RunConfig;
use crystal_core::eval::{
    Attenuation, EvalReport, IdentProtocol, Pooling, DEFAULT_FAR_TARGETS, DEFAULT_FPIR_TARGETS,
};
use crystal_core::io::checkpoint::{history_csv, read_model, write_head, write_model};
use crystal_core::io::features::{pool_dataset, FeatureRecord};
use crystal_core::io::report::write_report;
use crystal_core::io::{self, format_float, write_atomic, FeatureDataset};
use crystal_core::math::{DenseMatrix, DenseVector};
use crystal_core::trainer::{
    self, accuracy, extract_features, grad_check_model, init_model_and_head, HeadKind, LabeledSet,
};
use crystal_core::{alpha_lower_bound, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{synth, CliError, Command, ConfigArgs, SweepParam};

const LAMBDA_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
const GAMMA_GRID: [f64; 5] = [1.0, 1.1, 1.2, 1.3, 1.4];

pub(crate) fn run(command: Command) -> std::result::Result<(), CliError> {
    match command {
        Command::Train {
            data,
            idx_images,
            idx_labels,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let (set, _) = match (data, idx_images, idx_labels) {
                (Some(path), _, _) => io::load_feature_csv(&path)?.labeled_set()?,
                (None, Some(images), Some(labels)) => (idx_set(&images, &labels)?, Vec::new()),
                _ => {
                    return Err(CliError::Usage(
                        "train needs --data or --idx-images/--idx-labels".into(),
                    ))
                }
            };
            train(&set, &cfg, &out)?;
        }
        Command::Extract {
            model,
            input,
            idx_images,
            idx_labels,
            out,
        } => {
            let model = read_model(&model)?;
            let ds = match (input, idx_images, idx_labels) {
                (Some(path), _, _) => io::load_feature_csv(&path)?,
                (None, Some(images), Some(labels)) => idx_dataset(&idx_set(&images, &labels)?)?,
                _ => {
                    return Err(CliError::Usage(
                        "extract needs --input or --idx-images/--idx-labels".into(),
                    ))
                }
            };
            let features = extract_features(&model, &ds.feature_matrix())?;
            io::write_feature_csv(&out, &ds.with_features(&features)?)?;
            println!("rows={} dim={}", ds.len(), features.cols());
        }
        Command::Pool {
            input,
            out,
            lambda,
            media_average,
        } => {
            let pooling = if media_average {
                Pooling::MediaAverage
            } else {
                let l = lambda.unwrap_or(DEFAULT_LAMBDA);
                if !(l >= 0.0) || !l.is_finite() {
                    return Err(CliError::Usage(format!(
                        "--lambda must be non-negative, got {l}"
                    )));
                }
                Pooling::Quality(l)
            };
            let ds = io::load_feature_csv(&input)?;
            let pooled = pool_dataset(&ds.templates()?, pooling)?;
            io::write_feature_csv(&out, &pooled)?;
            println!("templates={}", pooled.len());
        }
        Command::EvalVerify {
            features,
            pairs,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let set = io::load_feature_csv(&features)?.template_set()?;
            let protocol = io::load_pair_protocol(&pairs)?;
            let report = EvalReport::verification(
                &set,
                &protocol,
                &cfg.scoring_options(),
                &DEFAULT_FAR_TARGETS,
            )?;
            emit_report(&out, &report)?;
        }
        Command::EvalIdentify {
            features,
            gallery,
            probes,
            open_set,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let set = io::load_feature_csv(&features)?.template_set()?;
            let protocol = IdentProtocol {
                gallery: io::load_id_list(&gallery)?,
                probes: io::load_id_list(&probes)?,
                open_set: open_set || cfg.open_set,
            };
            let report = EvalReport::identification(
                &set,
                &protocol,
                &cfg.scoring_options(),
                &DEFAULT_FPIR_TARGETS,
            )?;
            emit_report(&out, &report)?;
        }
        Command::GradCheck {
            configs,
            seed,
            eps,
            tol,
        } => grad_check(configs, seed, eps, tol)?,
        Command::AlphaBound {
            classes,
            probability,
        } => println!("{:.4}", alpha_lower_bound(classes, probability)?),
        Command::Synth(args) => {
            let s = synth::generate(&args)?;
            println!(
                "train_rows={} test_templates={} pairs={}",
                s.train_rows, s.test_templates, s.pairs
            );
        }
        Command::Sweep {
            features,
            pairs,
            param,
            values,
            far,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let values = values.unwrap_or_else(|| match param {
                SweepParam::Lambda => LAMBDA_GRID.to_vec(),
                SweepParam::Gamma => GAMMA_GRID.to_vec(),
            });
            let table = sweep(&features, &pairs, param, &values, &far, &cfg)?;
            print!("{table}");
            if let Some(out) = out {
                write_atomic(&out, table.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> std::result::Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn idx_set(images: &Path, labels: &Path) -> Result<LabeledSet> {
    let idx = io::load_idx_images(images, labels)?;
    let classes = idx.labels.iter().max().map_or(0, |m| m + 1);
    LabeledSet::new(idx.images, idx.labels, classes)
}

/// IDX samples as a feature dataset: one single-image template per sample,
/// subject id = digit label.
fn idx_dataset(set: &LabeledSet) -> Result<FeatureDataset> {
    let records = set
        .inputs
        .iter_rows()
        .zip(&set.labels)
        .enumerate()
        .map(|(i, (x, &l))| {
            Ok(FeatureRecord {
                subject_id: l.to_string(),
                template_id: format!("img{i}"),
                media_id: format!("img{i}"),
                detection_score: 0.5,
                feature: DenseVector::new(x.to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(records)
}

fn train(set: &LabeledSet, cfg: &RunConfig, out: &Path) -> Result<()> {
    let tc = cfg.train_config();
    let dims = cfg.layer_dims(set.inputs.cols());
    let (model, head) = init_model_and_head(&dims, set.num_classes, tc.head_kind, tc.seed)?;
    log::info!(
        "training {:?} on {} samples, {} classes, {} parameters",
        dims,
        set.len(),
        set.num_classes,
        model.num_parameters()
    );
    let trained = trainer::train(model, head, set, &tc)?;
    let acc = accuracy(&trained.model, &trained.head, tc.head_kind, set)?;
    write_model(&out.join("model.txt"), &trained.model)?;
    write_head(&out.join("head.txt"), &trained.head, tc.head_kind)?;
    write_atomic(
        &out.join("history.csv"),
        history_csv(&trained.history).as_bytes(),
    )?;
    println!(
        "final_loss={} train_accuracy={} alpha={}",
        format_float(*trained.history.losses.last().unwrap_or(&f64::NAN)),
        format_float(acc),
        format_float(trained.head.alpha())
    );
    Ok(())
}

fn emit_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_report(out, report)?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(())
}

/// Random small models with all three head kinds.
fn grad_check(configs: usize, seed: u64, eps: f64, tol: f64) -> std::result::Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < configs {
        let classes = [3, 10][rng.random_range(0..2)];
        let dim = [2, 8][rng.random_range(0..2)];
        let batch = [1, 7][rng.random_range(0..2)];
        let kind = match checked % 3 {
            0 => HeadKind::Softmax,
            1 => HeadKind::CrystalFixed(rng.random_range(1.0..20.0)),
            _ => HeadKind::CrystalTrainable,
        };
        let input_dim = 5;
        let data: Vec<f64> = (0..batch * input_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let set = LabeledSet::new(DenseMatrix::new(batch, input_dim, data)?, labels, classes)?;
        let (model, head) = init_model_and_head(&[input_dim, 6, dim], classes, kind, rng.random())?;
        let report = match grad_check_model(&model, &head, kind, &set, eps, tol) {
            Ok(r) => r,
            // A dead hidden layer maps a sample to the zero vector; draw again.
            Err(Error::NearZeroNorm { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        log::info!(
            "config {checked}: C={classes} D={dim} M={batch} {kind:?} max_rel_error={:e}",
            report.max_rel_error()
        );
        worst = worst.max(report.max_rel_error());
        checked += 1;
    }
    println!("configs={configs} max_rel_error={worst:e} tolerance={tol:e}");
    if worst < tol {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "max relative error {worst:e} exceeds {tol:e}"
        )))
    }
}

fn sweep(
    features: &Path,
    pairs: &Path,
    param: SweepParam,
    values: &[f64],
    far: &[f64],
    cfg: &RunConfig,
) -> std::result::Result<String, CliError> {
    let set = io::load_feature_csv(features)?.template_set()?;
    let protocol = io::load_pair_protocol(pairs)?;
    let name = match param {
        SweepParam::Lambda => "lambda",
        SweepParam::Gamma => "gamma",
    };
    let mut table = name.to_string();
    for f in far {
        table.push_str(&format!(",tar@{f:e}"));
    }
    table.push('\n');
    for &v in values {
        let mut opts = cfg.scoring_options();
        match param {
            SweepParam::Lambda => {
                if !(v >= 0.0) {
                    return Err(CliError::Usage(format!(
                        "lambda values must be non-negative, got {v}"
                    )));
                }
                opts.pooling = Pooling::Quality(v);
            }
            SweepParam::Gamma => opts.attenuation = Some(Attenuation::new(v, cfg.det_threshold)?),
        }
        let report = EvalReport::verification(&set, &protocol, &opts, far)?;
        table.push_str(&format_float(v));
        for (_, tar) in &report.tar_at_far {
            table.push(',');
            table.push_str(&format_float(*tar));
        }
        table.push('\n');
    }
    Ok(table)
}
