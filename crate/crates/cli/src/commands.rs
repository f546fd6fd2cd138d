use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use sat_core::davis;
use sat_core::eval::{evaluate_dataset, evaluate_dirs, write_sequence_csv, write_summary_json};
use sat_core::harness::{OracleHarness, OracleTruth};
use sat_core::maskops::BinaryMask;
use sat_core::segnet::{load_checkpoint, save_checkpoint};
use sat_core::synthdata::{render, SceneScript};
use sat_core::tracker::{track_sequence, write_telemetry_csv, NetworkSegmenter, Segmenter, Source, TrackOutput};
use sat_core::train::{pretrain_regression, sample_pairs, PairSampling, PairSource, Trainer};
use sat_core::{Error, Grid, NetworkConfig, SegNet, Tracker};
use serde::Serialize;

use crate::config::{RunConfig, SegmenterKind};

/// Per-sequence strategy usage written next to the masks.
#[derive(Debug, Serialize)]
struct TrackSummary<'a> {
    sequence: &'a str,
    frames: usize,
    objects: usize,
    tracklet_steps: usize,
    mask_box: usize,
    regression_box: usize,
    /// Share of steps judged normal.
    mask_rate: f64,
}

fn sequence_name(dir: &Path) -> Result<String> {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .with_context(|| format!("{} has no sequence name", dir.display()))
}

fn read_all_labels(annotations: &Path, frames: usize) -> Result<Vec<Grid<u8>>> {
    (0..frames)
        .map(|t| Ok(davis::read_label_png(&davis::annotation_path(annotations, t))?))
        .collect()
}

fn load_network(config: &RunConfig) -> Result<SegNet> {
    match &config.checkpoint {
        Some(path) => Ok(load_checkpoint(path)?),
        None => {
            warn!("no checkpoint configured; using randomly initialised `{}` weights", config.network);
            Ok(SegNet::new(NetworkConfig::preset(&config.network)?, config.seed)?)
        }
    }
}

pub fn track(config: &RunConfig, sequence: &Path, annotations: &Path, out: &Path, overlay: bool) -> Result<()> {
    let name = sequence_name(sequence)?;
    let frames = davis::list_frames(sequence)?;
    if frames.is_empty() {
        bail!("{}: no frames", sequence.display());
    }
    let init_path = davis::annotation_path(annotations, 0);
    if !init_path.is_file() {
        bail!("missing initial annotation {}", init_path.display());
    }
    let init = davis::read_label_png(&init_path)?;

    let tracker_config = config.tracker();
    let needs_truth = config.segmenter == SegmenterKind::Oracle
        || tracker_config.box_source == Source::GroundTruth
        || tracker_config.global_filter == Source::GroundTruth;
    let truth = if needs_truth {
        Some(read_all_labels(annotations, frames.len())?)
    } else {
        None
    };
    let hint_fn = |t: usize, id: u8| truth.as_ref().map(|labels| davis::mask_for_id(&labels[t], id));
    let hints: Option<&dyn Fn(usize, u8) -> Option<BinaryMask>> = truth.as_ref().map(|_| &hint_fn as _);
    let load = |t: usize| Ok(davis::read_frame(&frames[t])?);

    let output = match config.segmenter {
        SegmenterKind::Network => {
            let net = load_network(config)?;
            run_tracker(&NetworkSegmenter { net: &net }, config, frames.len(), load, &init, hints)?
        }
        SegmenterKind::Oracle => {
            let truth = OracleTruth::from_labels(truth.as_deref().expect("oracle reads every annotation"));
            let harness = OracleHarness {
                truth: &truth,
                settings: config.harness(),
            };
            run_tracker(&harness, config, frames.len(), load, &init, hints)?
        }
    };

    let dir = out.join(&name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (t, labels) in output.labels.iter().enumerate() {
        davis::write_label_png(&dir.join(format!("{}.png", davis::frame_name(t))), labels)?;
    }
    write_telemetry_csv(&dir.join("telemetry.csv"), &output.telemetry)?;
    if overlay {
        let odir = dir.join("overlay");
        fs::create_dir_all(&odir).with_context(|| format!("creating {}", odir.display()))?;
        for (t, labels) in output.labels.iter().enumerate() {
            let img = davis::overlay(&davis::read_frame(&frames[t])?, labels, 0.5)?;
            davis::write_frame_png(&odir.join(format!("{}.png", davis::frame_name(t))), &img)?;
        }
    }

    let (mask_box, regression_box) = output.strategy_counts();
    let steps = output.telemetry.len();
    let summary = TrackSummary {
        sequence: &name,
        frames: output.labels.len(),
        objects: davis::object_ids(&init).len(),
        tracklet_steps: steps,
        mask_box,
        regression_box,
        mask_rate: if steps == 0 { 1.0 } else { mask_box as f64 / steps as f64 },
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    info!(
        "{name}: {} frames, {} objects, mask-box {mask_box} / regression-box {regression_box}",
        summary.frames, summary.objects
    );
    Ok(())
}

fn run_tracker<S: Segmenter>(
    segmenter: &S,
    config: &RunConfig,
    frame_count: usize,
    load: impl FnMut(usize) -> sat_core::Result<sat_core::Image>,
    init: &Grid<u8>,
    hints: Option<&dyn Fn(usize, u8) -> Option<BinaryMask>>,
) -> Result<TrackOutput> {
    let tracker = Tracker::new(segmenter, config.tracker())?;
    Ok(track_sequence(&tracker, frame_count, load, init, hints)?)
}

pub fn eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let reports = evaluate_dirs(pred, gt)?;
    let summary = evaluate_dataset(&reports);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_summary_json(out, &summary)?;
    write_sequence_csv(&out.with_extension("csv"), &reports)?;
    println!(
        "JF_mean {:.4}  J_mean {:.4}  F_mean {:.4}  J_decay {:.4}  ({} sequences, {} objects)",
        summary.jf_mean, summary.j_mean, summary.f_mean, summary.j_decay, summary.sequences, summary.objects
    );
    Ok(())
}

pub fn synth(script: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut script = SceneScript::load(script)?;
    if let Some(seed) = seed {
        script.seed = seed;
    }
    let seq = render(&script)?;
    seq.write_davis(out)?;
    info!("{}: {} frames, {} objects", script.name, seq.len(), seq.object_count());
    Ok(())
}

/// Held-out tracks: a separate synthetic set, or the last fifth of the
/// DAVIS tracks when there are at least two.
fn split_sources(config: &RunConfig, data: Option<&Path>) -> Result<(PairSource, PairSource)> {
    match data {
        None => {
            let n = config.synthetic_sequences.max(1);
            let train = PairSource::easy(n, config.synthetic_frames, config.seed)?;
            let held = PairSource::easy(n.div_ceil(4), config.synthetic_frames, config.seed.wrapping_add(7919))?;
            Ok((train, held))
        }
        Some(root) => {
            let mut all = PairSource::from_davis(root)?;
            if all.tracks.len() < 2 {
                warn!("one annotated track; validating on training data");
                return Ok((all.clone(), all));
            }
            let held = all.tracks.split_off(all.tracks.len() - all.tracks.len().div_ceil(5));
            Ok((all, PairSource { tracks: held }))
        }
    }
}

pub fn train(config: &RunConfig, data: Option<&Path>, out: &Path) -> Result<()> {
    let train_config = config.train();
    train_config.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (source, held) = split_sources(config, data)?;
    let mut net = match &config.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => SegNet::new(NetworkConfig::preset(&config.network)?, config.seed)?,
    };
    let validation = sample_pairs(
        &held,
        net.config(),
        &PairSampling::default(),
        train_config.validation_pairs,
        config.seed.wrapping_add(1),
    )?;
    if train_config.pretrain_steps > 0 {
        let losses = pretrain_regression(
            &mut net,
            &source,
            train_config.pretrain_steps,
            train_config.batch_size,
            train_config.lr_peak,
            config.seed,
        )?;
        info!(
            "regression pretraining: loss {:.4} -> {:.4}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }

    let checkpoint = out.join("model.ckpt");
    let mut trainer = Trainer::new(net, train_config.clone())?;
    let mut epochs = Vec::new();
    for _ in 0..train_config.epochs {
        match trainer.train_epoch(&source, &validation) {
            Ok(m) => {
                info!(
                    "epoch {}: loss {:.4}, held-out soft IoU {:.3}, JF {:.3}",
                    m.epoch, m.mean_loss, m.validation.soft_iou, m.validation.jf_mean
                );
                epochs.push(m);
                save_checkpoint(&trainer.net, &checkpoint)?;
            }
            Err(e @ Error::NonFiniteLoss { .. }) => {
                // the check runs before the update, so these are the last finite weights
                let snapshot = out.join("diverged.ckpt");
                save_checkpoint(&trainer.net, &snapshot)?;
                trainer.write_log(&out.join("curve.csv"))?;
                return Err(e).with_context(|| format!("training diverged; snapshot at {}", snapshot.display()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.write_log(&out.join("curve.csv"))?;
    fs::write(out.join("epochs.json"), serde_json::to_string_pretty(&epochs)? + "\n")?;
    info!("wrote {}", checkpoint.display());
    Ok(())
}
