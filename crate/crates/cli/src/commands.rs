use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use vqdraw::autodiff::{grad_check as check_gradients, GradCheckConfig, Graph};
use vqdraw::codec::{
    decode, decode_batch, encode, encode_on_graph, read_code_file, sample_code, stage_strip,
    write_code_file, MeanSquaredError,
};
use vqdraw::data::{gen_mixture, load_idx, write_image_grid, Dataset, MixtureSpec, Split};
use vqdraw::refiner::{Architecture, InitialCanvas};
use vqdraw::training::{evaluate, load_checkpoint, loss_total, save_checkpoint, MetricsWriter};
use vqdraw::{Bound, Refiner, RefinerConfig, Tensor, TrainConfig, Trainer};

use crate::flags::Flags;
use crate::CliError;

pub struct Context {
    pub command: &'static str,
    pub flags: Flags,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    version: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    refiner: Option<&'a RefinerConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Lib(vqdraw::Error::io(path, e))
}

fn is_image(shape: &[usize]) -> bool {
    shape.len() == 3 && (shape[0] == 1 || shape[0] == 3)
}

/// Writes a grid as PGM/PPM for image data, otherwise as CSV with one tile
/// per line (`row,col,values...`).
fn write_tiles(
    stem: &Path,
    tiles: &[Tensor<f32>],
    rows: usize,
    cols: usize,
) -> Result<PathBuf, CliError> {
    let shape = tiles
        .first()
        .map(|t| t.shape().to_vec())
        .unwrap_or_default();
    if is_image(&shape) {
        let path = stem.with_extension(if shape[0] == 1 { "pgm" } else { "ppm" });
        write_image_grid(tiles, rows, cols, &path)?;
        return Ok(path);
    }
    let path = stem.with_extension("csv");
    let mut text = String::new();
    for (i, t) in tiles.iter().enumerate() {
        let values: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{},{},{}\n", i / cols, i % cols, values.join(",")));
    }
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

impl Context {
    pub fn new(command: &'static str, flags: Flags) -> Result<Self, CliError> {
        let out = flags
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("vqdraw-out"));
        std::fs::create_dir_all(&out).map_err(io(&out))?;
        Ok(Context {
            command,
            flags,
            out,
        })
    }

    fn seed(&self) -> u64 {
        self.flags.seed.unwrap_or(0)
    }

    /// Records the merged flags (reusable with `--config`) and the resolved
    /// configuration.
    fn manifest(
        &self,
        refiner: Option<&RefinerConfig>,
        train: Option<&TrainConfig>,
    ) -> Result<(), CliError> {
        let mut flags = self.flags.clone();
        flags.out = Some(self.out.clone());
        let resolved = Resolved {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            refiner,
            train,
        };
        let mut table = toml::Table::new();
        table.insert(
            "resolved".into(),
            toml::Value::try_from(&resolved).map_err(|e| CliError::Usage(e.to_string()))?,
        );
        let text = format!(
            "# vqdraw {} run; reusable with --config\n{}\n{}",
            self.command,
            flags.to_toml()?,
            toml::to_string(&table).map_err(|e| CliError::Usage(e.to_string()))?
        );
        let path = self.out.join("manifest.toml");
        std::fs::write(&path, text).map_err(io(&path))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.flags
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.vqdr"))
    }

    fn load_model(&self) -> Result<Refiner<f32>, CliError> {
        let path = self
            .flags
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::Usage(format!("{} needs --checkpoint", self.command)))?;
        Ok(load_checkpoint(&path, None)?.refiner)
    }

    fn mixture(&self) -> Result<Option<MixtureSpec>, CliError> {
        Ok(match &self.flags.mixture {
            Some(p) => Some(MixtureSpec::load(p)?),
            None => None,
        })
    }

    fn train_data(&self) -> Result<Dataset, CliError> {
        if let Some(p) = &self.flags.train_images {
            return Ok(load_idx(p, None, Split::Train)?);
        }
        match self.mixture()? {
            Some(spec) => Ok(gen_mixture(
                &spec,
                self.flags.mixture_count.unwrap_or(10_000),
                Split::Train,
            )?),
            None => Err(CliError::Usage(
                "train needs --train-images or --mixture".into(),
            )),
        }
    }

    /// Held-out data, if any source is configured. Mixture test points use
    /// the next seed.
    fn eval_data(&self) -> Result<Option<Dataset>, CliError> {
        if let Some(p) = &self.flags.test_images {
            return Ok(Some(load_idx(p, None, Split::Test)?));
        }
        match self.mixture()? {
            Some(mut spec) => {
                spec.seed = spec.seed.wrapping_add(1);
                let n = self.flags.eval_count.unwrap_or(1000);
                Ok(Some(gen_mixture(&spec, n, Split::Test)?))
            }
            None => Ok(None),
        }
    }

    fn input_data(&self) -> Result<Dataset, CliError> {
        if let Some(p) = &self.flags.images {
            return Ok(load_idx(p, None, Split::Test)?);
        }
        self.eval_data()?.ok_or_else(|| {
            CliError::Usage(format!(
                "{} needs --images, --test-images or --mixture",
                self.command
            ))
        })
    }

    fn selection(&self, data: &Dataset, default_count: usize) -> Result<Vec<usize>, CliError> {
        let idx = match &self.flags.indices {
            Some(idx) => idx.clone(),
            None => (0..self.flags.count.unwrap_or(default_count).min(data.len())).collect(),
        };
        if idx.is_empty() {
            return Err(CliError::Usage("no examples selected".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
            return Err(CliError::Usage(format!(
                "index {bad} out of range for {} examples",
                data.len()
            )));
        }
        Ok(idx)
    }

    fn check_shape(refiner: &Refiner<f32>, data: &Dataset) -> Result<(), CliError> {
        let want = &refiner.config().data_shape;
        if data.example_shape() != want.as_slice() {
            return Err(vqdraw::Error::shape("input", data.example_shape(), want).into());
        }
        Ok(())
    }

    fn sample_grid(&self, refiner: &Refiner<f32>, stem: &Path) -> Result<PathBuf, CliError> {
        let (rows, cols) = (self.flags.rows.unwrap_or(5), self.flags.cols.unwrap_or(5));
        if rows == 0 || cols == 0 {
            return Err(CliError::Usage(
                "grid needs at least one row and column".into(),
            ));
        }
        let cfg = refiner.config();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        let codes = (0..rows * cols)
            .map(|_| sample_code(cfg.options, cfg.stages, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let xs = decode_batch(refiner, &codes)?;
        let tiles: Vec<_> = (0..codes.len()).map(|i| xs.slice_outer(i)).collect();
        write_tiles(stem, &tiles, rows, cols)
    }

    fn stage_grid(
        &self,
        refiner: &Refiner<f32>,
        data: &Dataset,
        idx: &[usize],
        stem: &Path,
    ) -> Result<PathBuf, CliError> {
        let mut tiles = Vec::new();
        for &i in idx {
            tiles.extend(stage_strip(refiner, &data.example(i))?);
        }
        let cols = tiles.len() / idx.len();
        write_tiles(stem, &tiles, idx.len(), cols)
    }
}

fn resolve_refiner(f: &Flags, shape: &[usize]) -> Result<RefinerConfig, CliError> {
    let arch = f
        .arch
        .clone()
        .unwrap_or_else(|| if is_image(shape) { "cnn" } else { "dense" }.to_string());
    let mut cfg = match arch.as_str() {
        "cnn" => RefinerConfig {
            data_shape: shape.to_vec(),
            ..RefinerConfig::mnist()
        },
        "dense" => RefinerConfig {
            data_shape: shape.to_vec(),
            ..RefinerConfig::dense(64, 10, 1, 128)
        },
        other => {
            return Err(CliError::Usage(format!(
                "unknown architecture {other:?} (cnn or dense)"
            )))
        }
    };
    if let Some(k) = f.options {
        cfg.options = k;
    }
    if let Some(n) = f.stages {
        cfg.stages = n;
        cfg.stages_per_segment = n;
    }
    if let Some(s) = f.stages_per_segment {
        cfg.stages_per_segment = s;
    }
    if let Some(g) = f.head_gain {
        cfg.head_gain = g;
    }
    match &mut cfg.architecture {
        Architecture::Cnn {
            channels,
            downsample_steps,
            residual_blocks,
            norm_groups,
        } => {
            *channels = f.channels.unwrap_or(*channels);
            *downsample_steps = f.downsample_steps.unwrap_or(*downsample_steps);
            *residual_blocks = f.residual_blocks.unwrap_or(*residual_blocks);
            *norm_groups = f.norm_groups.unwrap_or(*norm_groups);
        }
        Architecture::Dense { hidden } => *hidden = f.hidden.unwrap_or(*hidden),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_train(f: &Flags) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let batch_size = f.batch_size.unwrap_or(d.batch_size);
    let cfg = TrainConfig {
        alpha: f.alpha.unwrap_or(d.alpha),
        batch_size,
        micro_batch_size: f.micro_batch_size.unwrap_or(batch_size),
        steps: f.steps.unwrap_or(d.steps),
        learning_rate: f.learning_rate.unwrap_or(d.learning_rate),
        seed: f.seed.unwrap_or(d.seed),
        deterministic: f.deterministic.unwrap_or(d.deterministic),
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn same_except_schedule(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        steps: 0,
        deterministic: false,
        ..c.clone()
    };
    strip(a) == strip(b)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let data = ctx.train_data()?;
    let eval = ctx.eval_data()?;
    let refiner_cfg = resolve_refiner(&ctx.flags, data.example_shape())?;
    let train_cfg = resolve_train(&ctx.flags)?;
    let ckpt = ctx.checkpoint_path();
    let resume = ctx.flags.resume.unwrap_or(false) && ckpt.exists();
    let mut trainer = if resume {
        let mut t = load_checkpoint(&ckpt, Some(&refiner_cfg))?;
        if !same_except_schedule(&t.config, &train_cfg) {
            return Err(vqdraw::Error::ConfigMismatch(format!(
                "checkpoint training settings {:?} differ from requested {:?}",
                t.config, train_cfg
            ))
            .into());
        }
        t.config = train_cfg.clone();
        info!("resuming from {} at step {}", ckpt.display(), t.step);
        t
    } else {
        Trainer::new(refiner_cfg.clone(), train_cfg.clone())?
    };
    ctx.manifest(Some(&refiner_cfg), Some(&train_cfg))?;

    let metrics_path = ctx.out.join("metrics.csv");
    if !resume && metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(io(&metrics_path))?;
    }
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let eval_count = ctx.flags.eval_count.unwrap_or(256);
    let evaluate_at = |t: &Trainer| -> Result<(), CliError> {
        if let Some(test) = &eval {
            let s = evaluate(&t.refiner, test, eval_count, 64)?;
            info!(
                "step {}: held-out l_chosen {:.6} final loss {:.6} entropy {:.4}",
                t.step, s.loss_chosen, s.final_loss, s.entropy.mean
            );
            let path = ctx.out.join("eval.csv");
            let fresh = !path.exists();
            let mut text = if fresh {
                "step,loss_chosen,loss_all,final_loss,entropy\n".to_string()
            } else {
                String::new()
            };
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                t.step, s.loss_chosen, s.loss_all, s.final_loss, s.entropy.mean
            ));
            use std::io::Write;
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .and_then(|mut f| f.write_all(text.as_bytes()))
                .map_err(io(&path))?;
        }
        Ok(())
    };
    if !resume {
        let eval_path = ctx.out.join("eval.csv");
        if eval_path.exists() {
            std::fs::remove_file(&eval_path).map_err(io(&eval_path))?;
        }
        save_checkpoint(&ckpt, &trainer)?;
    }
    let start = trainer.step;
    if trainer.step < train_cfg.steps {
        evaluate_at(&trainer)?;
    }
    let log_every = ctx.flags.log_every.unwrap_or(100).max(1);
    let checkpoint_every = ctx.flags.checkpoint_every.unwrap_or(0);
    let grid_every = ctx.flags.grid_every.unwrap_or(0);
    let mut applied = 0u64;
    while trainer.step < train_cfg.steps {
        match trainer.step(&data)? {
            Some(row) => {
                applied += 1;
                metrics.write(&row)?;
                if row.step % log_every == 0 {
                    info!(
                        "step {}: l_chosen {:.6} l_total {:.6} entropy {:.4}",
                        row.step, row.loss_chosen, row.loss_total, row.entropy
                    );
                }
            }
            None => warn!("step {} skipped after a non-finite loss", trainer.step),
        }
        if checkpoint_every > 0 && trainer.step % checkpoint_every == 0 {
            metrics.flush()?;
            save_checkpoint(&ckpt, &trainer)?;
        }
        if grid_every > 0 && trainer.step % grid_every == 0 {
            write_grids(
                ctx,
                &trainer,
                eval.as_ref().unwrap_or(&data),
                Some(trainer.step),
            )?;
        }
    }
    metrics.flush()?;
    save_checkpoint(&ckpt, &trainer)?;
    if trainer.step > start {
        if applied == 0 {
            return Err(CliError::Numerical(format!(
                "all {} steps were skipped after non-finite losses",
                trainer.step - start
            )));
        }
        evaluate_at(&trainer)?;
        write_grids(ctx, &trainer, eval.as_ref().unwrap_or(&data), None)?;
    }
    println!(
        "trained to step {} ({} skipped); checkpoint {}",
        trainer.step,
        trainer.skipped,
        ckpt.display()
    );
    Ok(())
}

fn write_grids(
    ctx: &Context,
    trainer: &Trainer,
    data: &Dataset,
    step: Option<u64>,
) -> Result<(), CliError> {
    let suffix = step.map(|s| format!("_step{s}")).unwrap_or_default();
    let samples = ctx.sample_grid(&trainer.refiner, &ctx.out.join(format!("samples{suffix}")))?;
    let idx: Vec<usize> = (0..data.len().min(5)).collect();
    let stages = ctx.stage_grid(
        &trainer.refiner,
        data,
        &idx,
        &ctx.out.join(format!("stages{suffix}")),
    )?;
    info!("wrote {} and {}", samples.display(), stages.display());
    Ok(())
}

pub fn encode_cmd(ctx: &Context) -> Result<(), CliError> {
    let refiner = ctx.load_model()?;
    ctx.manifest(Some(refiner.config()), None)?;
    let data = ctx.input_data()?;
    Context::check_shape(&refiner, &data)?;
    for i in ctx.selection(&data, 1)? {
        let trace = encode(&refiner, &data.example(i))?;
        let path = ctx.out.join(format!("code_{i:05}.vqdc"));
        write_code_file(&path, &trace.code)?;
        write_tiles(
            &ctx.out.join(format!("recon_{i:05}")),
            &[trace.reconstruction().clone()],
            1,
            1,
        )?;
        println!(
            "{}: code {:?} final loss {}",
            path.display(),
            trace.code.indices(),
            trace.final_loss()
        );
    }
    Ok(())
}

pub fn decode_cmd(ctx: &Context) -> Result<(), CliError> {
    let refiner = ctx.load_model()?;
    ctx.manifest(Some(refiner.config()), None)?;
    let codes = ctx
        .flags
        .codes
        .clone()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| CliError::Usage("decode needs --codes".into()))?;
    for path in codes {
        let code = read_code_file(&path)?;
        let x = decode(&refiner, &code)?;
        let stem = path
            .file_stem()
            .map(PathBuf::from)
            .unwrap_or_else(|| "decoded".into());
        let written = write_tiles(&ctx.out.join(stem), &[x], 1, 1)?;
        println!("{} -> {}", path.display(), written.display());
    }
    Ok(())
}

pub fn sample(ctx: &Context) -> Result<(), CliError> {
    let refiner = ctx.load_model()?;
    ctx.manifest(Some(refiner.config()), None)?;
    let path = ctx.sample_grid(&refiner, &ctx.out.join("samples"))?;
    println!("{}", path.display());
    Ok(())
}

pub fn reconstruct(ctx: &Context) -> Result<(), CliError> {
    let refiner = ctx.load_model()?;
    ctx.manifest(Some(refiner.config()), None)?;
    let data = ctx.input_data()?;
    Context::check_shape(&refiner, &data)?;
    let idx = ctx.selection(&data, 8)?;
    let mut tiles = Vec::with_capacity(2 * idx.len());
    let mut total = 0.0;
    for &i in &idx {
        let x = data.example(i);
        let trace = encode(&refiner, &x)?;
        total += trace.final_loss() as f64;
        tiles.push(x);
        tiles.push(trace.reconstruction().clone());
    }
    let path = write_tiles(&ctx.out.join("reconstructions"), &tiles, idx.len(), 2)?;
    println!(
        "{}: mean reconstruction loss {} over {} examples",
        path.display(),
        total / idx.len() as f64,
        idx.len()
    );
    Ok(())
}

pub fn stages(ctx: &Context) -> Result<(), CliError> {
    let refiner = ctx.load_model()?;
    ctx.manifest(Some(refiner.config()), None)?;
    let data = ctx.input_data()?;
    Context::check_shape(&refiner, &data)?;
    let idx = ctx.selection(&data, 5)?;
    let path = ctx.stage_grid(&refiner, &data, &idx, &ctx.out.join("stages"))?;
    println!("{}", path.display());
    Ok(())
}

/// Checks loss gradients of a freshly initialized small model in double
/// precision, with the greedy choices frozen.
pub fn grad_check(ctx: &Context) -> Result<(), CliError> {
    let f = &ctx.flags;
    let options = f.options.unwrap_or(3);
    let stages = f.stages.unwrap_or(2);
    let cfg = RefinerConfig {
        options,
        stages,
        stages_per_segment: f.stages_per_segment.unwrap_or(stages),
        head_gain: f.head_gain.unwrap_or(1.0),
        initial_canvas: InitialCanvas::Zeros,
        ..match f.arch.as_deref().unwrap_or("dense") {
            "dense" => RefinerConfig::dense(options, stages, 3, f.hidden.unwrap_or(4)),
            "cnn" => RefinerConfig {
                data_shape: vec![1, 4, 4],
                architecture: Architecture::Cnn {
                    channels: f.channels.unwrap_or(4),
                    downsample_steps: f.downsample_steps.unwrap_or(1),
                    residual_blocks: f.residual_blocks.unwrap_or(1),
                    norm_groups: f.norm_groups.unwrap_or(2),
                },
                ..RefinerConfig::mnist()
            },
            other => {
                return Err(CliError::Usage(format!(
                    "unknown architecture {other:?} (cnn or dense)"
                )))
            }
        }
    };
    cfg.validate()?;
    ctx.manifest(Some(&cfg), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    let refiner = Refiner::<f64>::new(cfg.clone(), &mut rng)?;
    let mut shape = vec![2];
    shape.extend_from_slice(&cfg.data_shape);
    let x = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
    let choices = {
        let mut g = Graph::new();
        let bound = refiner.params().bind(&mut g, false);
        let t = g.constant(x.clone());
        encode_on_graph(&mut g, &refiner, &bound, t, &MeanSquaredError, None)?.chosen
    };
    let defaults = GradCheckConfig::default();
    let config = GradCheckConfig {
        tolerance: f.tolerance.unwrap_or(defaults.tolerance),
        fd_step: f.fd_step.unwrap_or(defaults.fd_step),
        ..defaults
    };
    let report = check_gradients(
        |g, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let t = g.constant(x.clone());
            let trace = encode_on_graph(g, &refiner, &bound, t, &MeanSquaredError, Some(&choices))?;
            Ok(loss_total(g, &trace, 0.01)?.total)
        },
        refiner.params().tensors(),
        config,
    )?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "grad-check {verdict}: max relative error {:.3e} over {} coordinates ({} skipped at kinks), tolerance {:e}",
        report.max_rel_error,
        report.checked,
        report.unreliable.len(),
        report.tolerance
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient mismatch at {:?}: analytic {} numeric {}",
            report.worst, report.analytic_at_worst, report.numeric_at_worst
        )))
    }
}
