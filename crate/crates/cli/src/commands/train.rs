use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xms_core::adam::{AdamConfig, AdamState};
use xms_core::checkpoint::{load_checkpoint, save_checkpoint};
use xms_core::dataset::load_dataset;
use xms_core::losses::LossReport;
use xms_core::model::{Model, Precision};
use xms_core::params::Init;
use xms_core::scalar::Scalar;
use xms_core::tape::Tape;
use xms_core::tensor::Tensor;
use xms_core::XmsError;

use crate::config::TrainConfig;
use crate::run_record::write_run_record;

pub struct TrainSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub final_total: f64,
}

pub fn run(cfg: &TrainConfig) -> anyhow::Result<TrainSummary> {
    match cfg.model.precision {
        Precision::F32 => run_t::<f32>(cfg),
        Precision::F64 => run_t::<f64>(cfg),
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut per_term: Vec<(String, f64, f64)> = Vec::new();
    if let Some(first) = reports.first() {
        for (i, (name, _, _)) in first.per_term.iter().enumerate() {
            let b = reports.iter().map(|r| r.per_term[i].1).sum::<f64>() / n;
            let u = reports.iter().map(|r| r.per_term[i].2).sum::<f64>() / n;
            per_term.push((name.clone(), b, u));
        }
    }
    LossReport {
        wbce: sum(|r| r.wbce),
        iou: sum(|r| r.iou),
        ms: sum(|r| r.ms),
        ml: sum(|r| r.ml),
        div: sum(|r| r.div),
        total: sum(|r| r.total),
        per_term,
    }
}

fn csv_term(report: &LossReport, name: &str) -> f64 {
    report
        .per_term
        .iter()
        .find(|(n, _, _)| n == name)
        .map(|(_, b, i)| b + i)
        .unwrap_or(0.0)
}

fn run_t<T: Scalar>(cfg: &TrainConfig) -> anyhow::Result<TrainSummary> {
    if cfg.batch_size == 0 {
        anyhow::bail!("batch_size must be positive");
    }
    let samples = load_dataset(&cfg.dataset)?;
    let data: Vec<(Tensor<T>, Tensor<T>, Tensor<T>)> = samples
        .iter()
        .map(|s| (s.rgb.cast::<T>(), s.aux.cast::<T>(), s.gt.cast::<T>()))
        .collect();
    let n = data.len();

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        decay_interval: cfg.lr_decay_steps,
        decay_factor: cfg.lr_decay_factor,
        ..AdamConfig::default()
    };
    let (mut model, mut adam) = match &cfg.resume {
        Some(path) => {
            let (model, opt) = load_checkpoint::<T>(path)?;
            if model.cfg.hash() != cfg.model.hash() {
                return Err(XmsError::Checkpoint(format!(
                    "resume checkpoint config hash {} does not match the requested config {}",
                    model.cfg.hash_hex(),
                    cfg.model.hash_hex()
                ))
                .into());
            }
            let adam = opt.unwrap_or_else(|| AdamState::new(adam_cfg.clone(), &model.params));
            (model, adam)
        }
        None => {
            let model = Model::<T>::new(cfg.model.clone(), Init::KaimingUniform, cfg.seed)?;
            let adam = AdamState::new(adam_cfg, &model.params);
            (model, adam)
        }
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_run_record(&cfg.out_dir, "train", cfg.seed, cfg, Some(model.cfg.hash_hex()))?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = File::create(&log_path)?;
    writeln!(log, "step,lr,wbce,iou,ms,ml,div,total,p1,p2,p3,p4,low,mid,high")?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_u64);
    let mut pos = n; // forces a shuffle before the first step
    let mut final_total = f64::NAN;

    for step in 0..cfg.steps {
        model.params.zero_grads();
        let mut reports = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if pos >= n {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let (rgb, aux, gt) = &data[order[pos]];
            pos += 1;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, rgb, aux)?;
            let (total, report) = model.loss(&mut tape, &out, gt)?;
            if !report.total.is_finite() {
                return Err(XmsError::NonFinite(format!("loss at step {step}")).into());
            }
            tape.backward(total)?;
            tape.export_param_grads(&mut model.params);
            reports.push(report);
        }
        if cfg.batch_size > 1 {
            model.params.scale_grads(1.0 / cfg.batch_size as f64);
        }
        let lr_now = adam.current_lr();
        adam.step(&mut model.params)?;

        let r = mean_report(&reports);
        writeln!(
            log,
            "{step},{lr_now},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.wbce,
            r.iou,
            r.ms,
            r.ml,
            r.div,
            r.total,
            csv_term(&r, "p1"),
            csv_term(&r, "p2"),
            csv_term(&r, "p3"),
            csv_term(&r, "p4"),
            csv_term(&r, "low"),
            csv_term(&r, "mid"),
            csv_term(&r, "high"),
        )?;
        final_total = r.total;

        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && (step + 1) % every == 0 && step + 1 != cfg.steps {
                let path = cfg.out_dir.join(format!("step_{:06}.xmsc", step + 1));
                save_checkpoint(&path, &model, Some(&adam))?;
            }
        }
    }

    let final_path = cfg.out_dir.join("final.xmsc");
    save_checkpoint(&final_path, &model, Some(&adam))?;
    Ok(TrainSummary {
        steps: cfg.steps,
        final_checkpoint: final_path,
        log_path,
        final_total,
    })
}
