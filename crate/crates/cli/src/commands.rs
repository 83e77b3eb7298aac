//! The `train`, `generate`, `eval` and `inspect-checkpoint` commands.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use longscape::checkpoint;
use longscape::data::{augment_test, load_image, resize, save_image, Augment, BatchStream, DatasetIndex, Split};
use longscape::loss::masked_rec_loss;
use longscape::params::mix_seed;
use longscape::{Models, StepMetrics, TrainState, Trainer};
use longscape_tensor::kernels::{concat, slice_axis};
use longscape_tensor::{Tape, Tensor};

use crate::config::RunConfig;
use crate::proxy;

/// Name of the configuration dump written next to a run's outputs.
pub const RUN_CONFIG: &str = "run.cfg";
pub const METRICS: &str = "metrics.jsonl";
pub const TIMING: &str = "timing.log";
pub const CHECKPOINTS: &str = "checkpoints";
pub const LATEST: &str = "latest.lsc";
pub const SAMPLES: &str = "samples";
/// Images rendered into each epoch's sample grid.
pub const SAMPLE_COUNT: usize = 4;

pub fn trainer(cfg: &RunConfig) -> Result<Trainer> {
    let models = Models::new(cfg.model.clone())?;
    Ok(Trainer::new(models, cfg.schedule.clone(), cfg.weights, cfg.seed)?)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: RunConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last: Option<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// Keeps the metrics lines of steps up to `step`, dropping anything logged
/// after the checkpoint a run resumes from.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let m: StepMetrics = serde_json::from_str(&line).with_context(|| format!("bad line in {}", path.display()))?;
        if m.step > step {
            break;
        }
        kept.push_str(&line);
        kept.push('\n');
    }
    fs::write(path, kept)?;
    Ok(())
}

fn sample_inputs(data: &Path, n: usize) -> Result<Vec<Tensor<f32>>> {
    let idx = DatasetIndex::scan(data, Split::Test).or_else(|_| DatasetIndex::scan(data, Split::Train))?;
    idx.files
        .iter()
        .take(SAMPLE_COUNT)
        .map(|p| Ok(augment_test(&load_image(p)?, n)?))
        .collect()
}

/// One row per sample: ground truth on the left, generated image on the right.
fn render_grid(trainer: &Trainer, state: &TrainState<f32>, samples: &[Tensor<f32>], path: &Path) -> Result<()> {
    let n = trainer.models.input();
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let truth = s.reshape(&[1, 3, n, 2 * n])?;
        let out = trainer.models.generator.predict(&slice_axis(&truth, 3, 0, n)?, &state.gen)?;
        rows.push(concat(&[&truth, &out], 3)?);
    }
    let grid = concat(&rows.iter().collect::<Vec<_>>(), 2)?;
    let s = grid.shape().to_vec();
    save_image(&grid.reshape(&s[1..])?, path)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<TrainSummary> {
    let cfg = &args.config;
    let t = trainer(cfg)?;
    let n = t.models.input();
    let idx = DatasetIndex::scan(&args.data, Split::Train)?;
    let batch = cfg.schedule.batch;
    let per_epoch = idx.batches_per_epoch(batch) as u64;
    if per_epoch == 0 {
        bail!("{} training images cannot fill one batch of {batch}", idx.len());
    }
    let ckpt_dir = args.out.join(CHECKPOINTS);
    let sample_dir = args.out.join(SAMPLES);
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(&sample_dir)?;
    fs::write(args.out.join(RUN_CONFIG), cfg.dump())?;

    let metrics_path = args.out.join(METRICS);
    let timing_path = args.out.join(TIMING);
    let mut state: TrainState<f32> = match &args.resume {
        Some(p) => {
            let s = checkpoint::load(p, Some(t.fingerprint())).with_context(|| format!("resuming from {}", p.display()))?;
            truncate_metrics(&metrics_path, s.step)?;
            s
        }
        None => {
            fs::write(&metrics_path, "")?;
            fs::write(&timing_path, "")?;
            TrainState::init(&t.models, cfg.seed)?
        }
    };
    let append = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
    let mut metrics = append(&metrics_path)?;
    let mut timing = append(&timing_path)?;
    let samples = sample_inputs(&args.data, n)?;

    let first_step = state.step;
    let limit = if cfg.max_steps == 0 { u64::MAX } else { cfg.max_steps };
    let started = Instant::now();
    let mut last = None;
    let save = |state: &TrainState<f32>| -> Result<PathBuf> {
        let p = ckpt_dir.join(format!("step-{:08}.lsc", state.step));
        checkpoint::save(state, t.fingerprint(), &p)?;
        checkpoint::save(state, t.fingerprint(), &ckpt_dir.join(LATEST))?;
        Ok(p)
    };
    let mut saved = None;
    'epochs: while state.step < limit {
        let epoch = state.step / per_epoch;
        if epoch >= cfg.schedule.epochs {
            break;
        }
        state.epoch = epoch;
        let start = (state.step % per_epoch) as usize;
        let stream = BatchStream::new(&idx, batch, mix_seed(cfg.seed, epoch), Augment::Train(n), start)?;
        for b in stream {
            let step_start = Instant::now();
            let m = t.train_step(&mut state, &b?)?;
            if !m.all_finite() {
                bail!("non-finite loss at step {}: {m:?}", m.step);
            }
            writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
            writeln!(
                timing,
                "step {} epoch {} step_seconds {:.4} total_seconds {:.3}",
                m.step,
                m.epoch,
                step_start.elapsed().as_secs_f64(),
                started.elapsed().as_secs_f64()
            )?;
            if m.step == first_step + 1 || m.step % 10 == 0 {
                eprintln!(
                    "step {} epoch {} l_rec {:.5} l_adv_g {} l_d {}",
                    m.step,
                    m.epoch,
                    m.l_rec,
                    m.l_adv_g.map_or("-".into(), |v| format!("{v:.5}")),
                    m.l_d.map_or("-".into(), |v| format!("{v:.5}"))
                );
            }
            last = Some(m);
            saved = None;
            if state.step % cfg.checkpoint_every == 0 {
                saved = Some(save(&state)?);
            }
            if state.step >= limit {
                break 'epochs;
            }
        }
        render_grid(&t, &state, &samples, &sample_dir.join(format!("epoch-{epoch:05}.png")))?;
    }
    let checkpoint = match saved {
        Some(p) => p,
        None => save(&state)?,
    };
    metrics.flush()?;
    Ok(TrainSummary {
        first_step,
        last,
        checkpoint,
    })
}

/// Finds the configuration of the run that wrote `ckpt`: `run.cfg` in the
/// checkpoint's directory or its parent.
pub fn config_for_checkpoint(ckpt: &Path) -> Result<RunConfig> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    for d in [dir, dir.parent().unwrap_or(dir)] {
        let p = d.join(RUN_CONFIG);
        if p.is_file() {
            return RunConfig::load(&p, &[]);
        }
    }
    bail!("no {RUN_CONFIG} next to {}; pass --config", ckpt.display())
}

fn load_generator_state(ckpt: &Path, cfg: &RunConfig) -> Result<(Trainer, TrainState<f32>)> {
    if !ckpt.is_file() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let t = trainer(cfg)?;
    let state = checkpoint::load(ckpt, Some(t.fingerprint())).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((t, state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateReport {
    pub width: usize,
    pub height: usize,
    /// `(column, mean absolute difference)` across each seam between tiles.
    pub seams: Vec<(usize, f64)>,
}

/// Mean absolute difference between columns `c - 1` and `c` of a
/// `3 x H x W` image.
pub fn seam_mad(img: &Tensor<f32>, c: usize) -> f64 {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut acc = 0.0;
    for ch in 0..3 {
        for y in 0..h {
            let row = (ch * h + y) * w;
            acc += (d[row + c] as f64 - d[row + c - 1] as f64).abs();
        }
    }
    acc / (3 * h) as f64
}

pub fn generate(ckpt: &Path, cfg: &RunConfig, input: &Path, right: usize, left: usize, out: &Path) -> Result<GenerateReport> {
    let (t, state) = load_generator_state(ckpt, cfg)?;
    let n = t.models.input();
    let img = resize(&load_image(input)?, n, n)?.reshape(&[1, 3, n, n])?;
    let long = t.models.generator.generate_multistep(&img, &state.gen, right, left)?;
    let width = long.shape()[3];
    let long = long.reshape(&[3, n, width])?;
    save_image(&long, out)?;
    let seams: Vec<(usize, f64)> = (1..=right + left).map(|k| (k * n, seam_mad(&long, k * n))).collect();
    let mut text = format!("# seam report for {}: mean absolute difference across each tile seam\n", out.display());
    for (i, (c, mad)) in seams.iter().enumerate() {
        writeln!(text, "seam {} column {c} mad {mad:.6}", i + 1)?;
    }
    fs::write(out.with_extension("seams.txt"), text)?;
    Ok(GenerateReport {
        width,
        height: n,
        seams,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub masked_l2: f64,
    pub psnr: f64,
    pub frechet: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "# proxy metrics, not comparable to published IS/FID\nimages = {}\nmasked_l2 = {:.6}\npsnr_predicted_half_db = {:.4}\npooled_frechet = {:.6}\n",
            self.images, self.masked_l2, self.psnr, self.frechet
        )
    }
}

pub fn eval(ckpt: &Path, cfg: &RunConfig, data: &Path) -> Result<EvalReport> {
    let (t, state) = load_generator_state(ckpt, cfg)?;
    let n = t.models.input();
    let idx = DatasetIndex::scan(data, Split::Test)?;
    let (mut l2, mut psnr) = (0.0, 0.0);
    let (mut fake_feats, mut real_feats) = (Vec::new(), Vec::new());
    for path in &idx.files {
        let truth = augment_test(&load_image(path)?, n)?.reshape(&[1, 3, n, 2 * n])?;
        let out = t.models.generator.predict(&slice_axis(&truth, 3, 0, n)?, &state.gen)?;
        let tape = Tape::new();
        l2 += masked_rec_loss(&tape.constant(out.clone()), &tape.constant(truth.clone()), t.mask())?
            .value()
            .item() as f64;
        let fake = slice_axis(&out, 3, n, n)?.reshape(&[3, n, n])?;
        let real = slice_axis(&truth, 3, n, n)?.reshape(&[3, n, n])?;
        psnr += proxy::psnr(fake.data(), real.data());
        fake_feats.push(proxy::pooled_features(&fake)?);
        real_feats.push(proxy::pooled_features(&real)?);
    }
    let k = idx.len() as f64;
    Ok(EvalReport {
        images: idx.len(),
        masked_l2: l2 / k,
        psnr: psnr / k,
        frechet: proxy::frechet(&proxy::gaussian(&fake_feats)?, &proxy::gaussian(&real_feats)?),
    })
}

pub fn inspect(ckpt: &Path, entries: bool) -> Result<String> {
    let (h, list) = checkpoint::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let mut out = String::new();
    writeln!(out, "version = {}", h.version)?;
    writeln!(out, "fingerprint = {:016x}", h.fingerprint)?;
    writeln!(out, "step = {}", h.step)?;
    writeln!(out, "epoch = {}", h.epoch)?;
    writeln!(out, "adam_steps = {} {} {}", h.adam_steps[0], h.adam_steps[1], h.adam_steps[2])?;
    writeln!(out, "entries = {}", list.len())?;
    for store in ["gen", "cg", "cl"] {
        let count: usize = list
            .iter()
            .filter(|e| e.name.split_once('/').is_some_and(|(p, _)| p == store))
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        writeln!(out, "parameters.{store} = {count}")?;
    }
    if entries {
        for e in &list {
            writeln!(out, "{} {:?} {:?}", e.name, e.dtype, e.shape)?;
        }
    }
    Ok(out)
}
