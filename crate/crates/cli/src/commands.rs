use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use femtodet::archive::{load_model, save_model, sidecar_path};
use femtodet::energy::{
    compute_mept, compute_power, estimate_cost, ingest_trace, neck_cost, round2, NeckKind, PerfSeries, TraceLabel,
};
use femtodet::fold::{fold_model, verify_fold_model_f32};
use femtodet::net::{FemtoDet, ModelConfig};
use femtodet::train::eval::evaluate_ap;
use femtodet::train::schedule::{build_recwr_schedule_with, equal_split, flat_schedule};
use femtodet::train::trainer::{predict, toy_model_config};
use femtodet::tensor::Tensor;
use femtodet::train::{generate_dataset, train_toy, ToyDatasetConfig, TrainConfig};

use crate::boxes::{per_image, read_gt, read_predictions};
use crate::run_config::RunConfig;
use crate::{CliError, ScheduleKind};

/// Whole-model tolerance for `fold --verify` in 32-bit.
pub const FOLD_TOL: f64 = 1e-4;

fn report(body: &str) {
    println!("---BEGIN REPORT---");
    println!("{}", body.trim_end());
    println!("---END REPORT---");
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn load(path: &Path) -> Result<FemtoDet<f32>, CliError> {
    load_model(path).map_err(|e| io_err(path, e))
}

pub fn fold(model: &Path, out: &Path, verify: bool, probes: usize, seed: u64) -> Result<(), CliError> {
    let m = load(model)?;
    let folded = fold_model(&m)?;
    save_model(&folded, out)?;
    let mut body = format!("command=fold\nout={}\n", out.display());
    if !verify {
        report(&body);
        return Ok(());
    }
    let r = verify_fold_model_f32(&m, probes, seed)?;
    let pass = r.passes(FOLD_TOL);
    let _ = writeln!(body, "{r}\ntolerance={FOLD_TOL:e}\nverdict={}", if pass { "pass" } else { "fail" });
    report(&body);
    if pass {
        Ok(())
    } else {
        Err(CliError::Verify(format!(
            "folded model differs by {:e} (tolerance {FOLD_TOL:e})",
            r.max_abs_diff
        )))
    }
}

pub fn train(config: Option<&Path>, kind: ScheduleKind, epochs: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model_cfg = cfg.model.clone().unwrap_or_else(|| toy_model_config(&cfg.dataset));
    let mut model = FemtoDet::<f32>::from_seed(&model_cfg, seed)?;
    let data = generate_dataset(&cfg.dataset)?;
    // Running statistics from clean images, so even untrained weights give
    // sensibly scaled eval-mode outputs.
    let first: Vec<_> = data.train.iter().take(cfg.train.batch_size.max(2)).map(|s| s.image.clone()).collect();
    model.calibrate_bn(&Tensor::concat_batch(&first)?)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let schedule = match kind {
        ScheduleKind::Flat if epochs == 0 => {
            let path = out.join("initial.femto");
            save_model(&model, &path)?;
            report(&format!("command=train\nschedule=flat\nepochs=0\nseed={seed}\ncheckpoints=initial.femto"));
            return Ok(());
        }
        ScheduleKind::Flat => flat_schedule(epochs, cfg.lr),
        ScheduleKind::Recwr if epochs < 4 => {
            return Err(CliError::Input(format!("recwr needs at least 4 epochs (one per stage), got {epochs}")));
        }
        ScheduleKind::Recwr => build_recwr_schedule_with(equal_split(epochs), cfg.lr)?,
    };
    let outcome = train_toy(model, &schedule, &data, &cfg.train, seed)?;

    let mut index = String::new();
    let mut names = Vec::new();
    for ck in &outcome.state.checkpoints {
        let name = format!("stage{}.femto", ck.stage);
        let path = out.join(&name);
        ck.weights.save(&path)?;
        fs::write(sidecar_path(&path), model_cfg.to_toml_string()).map_err(|e| io_err(&path, e))?;
        let stage = &schedule.stages[ck.stage - 1];
        let augs: Vec<String> = stage.augmentations.iter().map(|a| format!("{a:?}")).collect();
        let _ = writeln!(
            index,
            "stage={} epochs={} augmentations={} checkpoint={name}",
            ck.stage,
            stage.epochs,
            augs.join(",")
        );
        names.push(name);
    }
    fs::write(out.join("stages.txt"), &index).map_err(|e| io_err(out, e))?;
    let log = outcome.log.render();
    fs::write(out.join("metrics.log"), &log).map_err(|e| io_err(out, e))?;
    print!("{log}");

    let kind_name = match kind {
        ScheduleKind::Recwr => "recwr",
        ScheduleKind::Flat => "flat",
    };
    let mut body = format!(
        "command=train\nschedule={kind_name}\nepochs={epochs}\nseed={seed}\nsteps={}\ncheckpoints={}\n",
        outcome.log.step_losses.len(),
        names.join(",")
    );
    if !outcome.log.step_losses.is_empty() {
        let _ = writeln!(
            body,
            "initial_loss={:.6}\nfinal_loss={:.6}",
            outcome.log.initial_loss(),
            outcome.log.final_loss()
        );
    }
    if let Some(ap) = &outcome.log.final_ap {
        let _ = writeln!(body, "{ap}");
    }
    report(&body);
    Ok(())
}

pub fn eval(
    model: Option<&Path>,
    predictions: Option<&Path>,
    dataset: Option<&Path>,
    gt: Option<&Path>,
    iou: f64,
) -> Result<(), CliError> {
    let (gts, samples) = match (dataset, gt) {
        (Some(d), _) => {
            let text = fs::read_to_string(d).map_err(|e| io_err(d, e))?;
            let cfg = ToyDatasetConfig::from_toml_str(&text)?;
            let val = generate_dataset(&cfg)?.val;
            (val.iter().map(|s| s.gt_boxes()).collect::<Vec<_>>(), Some(val))
        }
        (None, Some(g)) => (per_image(read_gt(g)?, 0), None),
        (None, None) => return Err(CliError::Input("either --dataset or --gt is required".into())),
    };
    let mut gts = gts;
    let preds = match (model, predictions) {
        (Some(m), _) => {
            let model = load(m)?;
            let Some(samples) = &samples else {
                return Err(CliError::Input("--model needs --dataset to supply images".into()));
            };
            let tc = TrainConfig::default();
            predict(&model, samples, 16, tc.score_thresh, tc.nms_iou)?
        }
        (None, Some(p)) => {
            let preds = per_image(read_predictions(p)?, gts.len());
            if preds.len() > gts.len() {
                if samples.is_some() {
                    return Err(CliError::Input(format!(
                        "predictions reference image {} but the split has {}",
                        preds.len() - 1,
                        gts.len()
                    )));
                }
                gts.resize_with(preds.len(), Vec::new);
            }
            preds
        }
        (None, None) => return Err(CliError::Input("either --model or --predictions is required".into())),
    };
    let r = evaluate_ap(&preds, &gts, iou)?;
    report(&format!(
        "command=eval\nimages={}\ndetections={}\n{r}",
        gts.len(),
        preds.iter().map(Vec::len).sum::<usize>()
    ));
    Ok(())
}

fn read_perf(arg: &str) -> Result<PerfSeries, CliError> {
    if let Ok(v) = arg.trim().parse::<f64>() {
        return Ok(PerfSeries::scalar(v));
    }
    let path = Path::new(arg);
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let vals = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Input(format!("{}:{}: `{}` is not a number", path.display(), i + 1, l.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.is_empty() {
        return Err(CliError::Input(format!("{}: no performance values", path.display())));
    }
    Ok(PerfSeries(vals))
}

pub fn energy(trace: &Path, baseline: &Path, perf: &str) -> Result<(), CliError> {
    let model = ingest_trace(trace, TraceLabel::Model).map_err(|e| io_err(trace, e))?;
    let empty = ingest_trace(baseline, TraceLabel::Empty).map_err(|e| io_err(baseline, e))?;
    let perf = read_perf(perf)?;
    let power = compute_power(&model, &empty)?;
    let mut body = format!(
        "command=energy\nsamples={}\ntotal_time_seconds={}\nperf_values={}\n",
        model.energies.len(),
        model.total_time,
        perf.0.len()
    );
    if power == 0.0 {
        // No energy above the baseline: the ratio has no finite value.
        let _ = write!(body, "power_watts=0\nmean_perf={}\nmept=undefined", round2(perf.mean()));
    } else {
        let _ = write!(body, "{}", compute_mept(&perf, power)?);
    }
    report(&body);
    Ok(())
}

pub fn cost(config: Option<&Path>) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => ModelConfig::from_toml_str(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => ModelConfig::default(),
    };
    let model = FemtoDet::<f32>::from_seed(&cfg, 0)?;
    let r = estimate_cost(&model, cfg.input_size)?;
    let folded = estimate_cost(&fold_model(&model)?, cfg.input_size)?;
    let shapes = cfg.stage_shapes()?;
    let taps: Vec<_> = cfg.neck_taps.iter().map(|&t| shapes[t]).collect();
    let mut body = format!(
        "command=cost\ninput={}x{}\n{r}\ntraffic_bytes={}\nfolded_macs={}\nfolded_traffic_bytes={}\n",
        cfg.input_size.0,
        cfg.input_size.1,
        r.traffic(),
        folded.macs,
        folded.traffic()
    );
    for kind in [NeckKind::Fpn, NeckKind::Pan, NeckKind::Shared] {
        let n = neck_cost(kind, &taps, cfg.width(cfg.neck_channels))?;
        let _ = writeln!(body, "neck_{}_macs={}\nneck_{}_traffic_bytes={}", kind.name(), n.macs, kind.name(), n.traffic());
    }
    report(&body);
    Ok(())
}
