use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use snrlab::checkpoint;
use snrlab::config::RunConfig;
use snrlab::experiments::{self, tail_mean};
use snrlab::lora::LoraAdapter;
use snrlab::net::{Cond, DenoiserParams};
use snrlab::samplers::{SamplerSpec, SnrSampler};
use snrlab::stats;
use snrlab::styledata::{Canvas, DataPoint, StyleCorpus};
use snrlab::train;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "snrlab", version, about = "Toy rectified-flow lab for log-SNR samplers and LoRA fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Density tables and Monte Carlo checks for the configured samplers.
    AnalyzeSampler(Common),
    /// Train the base model on the toy corpus.
    Pretrain(Common),
    /// Train a LoRA adapter on the reference style.
    Finetune(Common),
    /// Generate and score images with the base and an optional adapter.
    Sample(Common),
    /// Withhold the style condition for the first steps of generation.
    Switch(Common),
    /// Fine-tune and score over a grid of sampler means, spreads and ranks.
    Ablate(Common),
    /// Write the labeled corpus and the reference set as PNGs plus a manifest.
    ExportCorpus(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Base checkpoint path.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Adapter checkpoint path.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Seed of the command's main random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps (pretrain, finetune, ablate).
    #[arg(long)]
    steps: Option<usize>,
    /// Any config value as key.path=value; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn json_str(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string")
}

impl Common {
    fn load(&self, command: &Command) -> Result<RunConfig> {
        let mut o = Vec::new();
        if let Some(p) = &self.out {
            o.push(format!("out_dir={}", json_str(p)));
        }
        if let Some(p) = &self.base {
            o.push(format!("base={}", json_str(p)));
        }
        if let Some(p) = &self.adapter {
            o.push(format!("adapter={}", json_str(p)));
        }
        if let Some(s) = self.seed {
            o.push(match command {
                Command::AnalyzeSampler(_) => format!("analyze.seed={s}"),
                Command::Pretrain(_) => format!("pretrain.seed={s}"),
                Command::Finetune(_) => format!("finetune.seed={s}"),
                Command::Sample(_) => format!("eval.generation.seed={s}"),
                Command::Switch(_) => format!("switch.generation.seed={s}"),
                Command::Ablate(_) => format!("ablate.seeds=[{s}]"),
                Command::ExportCorpus(_) => format!("corpus.labeled_seed={s}"),
            });
        }
        if let Some(n) = self.steps {
            match command {
                Command::Pretrain(_) => o.push(format!("pretrain.steps={n}")),
                Command::Finetune(_) | Command::Ablate(_) => o.push(format!("finetune.steps={n}")),
                _ => bail!("--steps only applies to pretrain, finetune and ablate"),
            }
        }
        o.extend(self.set.iter().cloned());
        Ok(RunConfig::load(self.config.as_deref(), &o)?)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::AnalyzeSampler(c)
        | Command::Pretrain(c)
        | Command::Finetune(c)
        | Command::Sample(c)
        | Command::Switch(c)
        | Command::Ablate(c)
        | Command::ExportCorpus(c) => c,
    };
    let cfg = common.load(&cli.command)?;
    create_dir(&cfg.out_dir)?;
    match cli.command {
        Command::AnalyzeSampler(_) => analyze_sampler(&cfg),
        Command::Pretrain(_) => pretrain(&cfg),
        Command::Finetune(_) => finetune(&cfg),
        Command::Sample(_) => sample(&cfg),
        Command::Switch(_) => switch(&cfg),
        Command::Ablate(_) => ablate(&cfg),
        Command::ExportCorpus(_) => export_corpus(&cfg),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(s, "{i},{l}").unwrap();
    }
    s
}

fn png(x: ArrayView1<f64>, canvas: &Canvas) -> image::RgbImage {
    let n = canvas.pixels();
    image::RgbImage::from_fn(canvas.width as u32, canvas.height as u32, |px, py| {
        let p = py as usize * canvas.width + px as usize;
        image::Rgb(std::array::from_fn(|c| {
            ((x[c * n + p].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        }))
    })
}

fn save_png(path: &Path, x: ArrayView1<f64>) -> Result<()> {
    png(x, &Canvas::default())
        .save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn sampler_label(s: &SnrSampler) -> String {
    let spec: SamplerSpec = (*s).into();
    let (mut label, shift) = match spec {
        SamplerSpec::UniformTime { shift } => ("uniform_time".to_string(), shift),
        SamplerSpec::LogitNormal { mean, std, shift } => (format!("logit_normal_m{mean}_s{std}"), shift),
        SamplerSpec::StyleFriendly { mean, std, shift } => (format!("style_friendly_m{mean}_s{std}"), shift),
        SamplerSpec::EdmLogNormal { p_mean, p_std, shift } => (format!("edm_log_normal_m{p_mean}_s{p_std}"), shift),
    };
    if shift != 1.0 {
        write!(label, "_k{shift}").unwrap();
    }
    label
}

/// Density per bin of `values` over `[lo, hi)`, normalized by the total
/// count so out-of-range values lower the mass.
fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64)> {
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v < hi {
            counts[(((v - lo) / w) as usize).min(bins - 1)] += 1;
        }
    }
    let n = values.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (lo + (i as f64 + 0.5) * w, c as f64 / (n * w)))
        .collect()
}

fn xp_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("x,p\n");
    for (x, p) in rows {
        writeln!(s, "{x},{p}").unwrap();
    }
    s
}

fn analyze_sampler(cfg: &RunConfig) -> Result<()> {
    let a = &cfg.analyze;
    let dir = cfg.out_dir.join("analysis");
    create_dir(&dir)?;
    let mut summary = String::from("sampler,ks_lambda,ks_time,lambda_integral,time_integral,lambda_mode,mass_t_0.8_1\n");
    for (i, s) in a.samplers.iter().enumerate() {
        let label = sampler_label(s);
        let table = s.density_table_in(a.grid, (a.lambda_min, a.lambda_max))?;
        write(&dir.join(format!("{label}_lambda.csv")), xp_csv(&table.lambda))?;
        write(&dir.join(format!("{label}_time.csv")), xp_csv(&table.time))?;

        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(i as u64);
        let levels = s.sample(&mut rng, a.mc_samples);
        let mut lambdas: Vec<f64> = levels.iter().map(|l| l.lambda).collect();
        let mut times: Vec<f64> = levels.iter().map(|l| l.t).collect();
        let lh = histogram(&lambdas, a.lambda_min, a.lambda_max, a.bins);
        let th = histogram(&times, 0.0, 1.0, a.bins);
        let ks_l = stats::ks_statistic(&mut lambdas, |x| s.cdf_lambda(x));
        // t decreases in lambda, so P(T <= t) = 1 - F_lambda(lambda(t))
        let ks_t = stats::ks_statistic(&mut times, |t| s.time_mass(0.0, t));
        let mut lcsv = xp_csv(&lh);
        writeln!(lcsv, "ks,{ks_l}").unwrap();
        write(&dir.join(format!("{label}_lambda_hist.csv")), lcsv)?;
        let mut tcsv = xp_csv(&th);
        writeln!(tcsv, "ks,{ks_t}").unwrap();
        write(&dir.join(format!("{label}_time_hist.csv")), tcsv)?;

        writeln!(
            summary,
            "{label},{ks_l},{ks_t},{},{},{},{}",
            table.lambda_integral(),
            table.time_integral(),
            table.lambda_mode(),
            s.time_mass(0.8, 1.0)
        )
        .unwrap();
        eprintln!("{label}: KS lambda {ks_l:.5}, KS t {ks_t:.5}");
    }
    write(&dir.join("summary.csv"), summary)
}

/// The config stored in checkpoint headers, without file locations so that
/// identical runs in different directories write identical bytes.
fn config_echo(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(m) = v.as_object_mut() {
        for key in ["out_dir", "base", "adapter"] {
            m.remove(key);
        }
    }
    v
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    eprintln!("pretraining for {} steps", cfg.pretrain.steps);
    let out = experiments::pretrain_base(&cfg.corpus, &cfg.pretrain)?;
    let path = cfg.base_path();
    checkpoint::save_base(&path, &out.params, cfg.pretrain.seed, config_echo(cfg))?;
    write(&cfg.out_dir.join("pretrain_loss.csv"), loss_csv(&out.trace))?;
    eprintln!("final loss {:.4}, wrote {}", tail_mean(&out.trace, 50), path.display());
    Ok(())
}

fn load_base(cfg: &RunConfig) -> Result<DenoiserParams> {
    let path = cfg.base_path();
    let (base, _) = checkpoint::load_base(&path, Some(&experiments::toy_architecture()))
        .with_context(|| format!("loading base checkpoint {}", path.display()))?;
    Ok(base)
}

fn load_adapter(cfg: &RunConfig, base: &DenoiserParams) -> Result<Option<LoraAdapter>> {
    let Some(path) = &cfg.adapter else {
        return Ok(None);
    };
    let (adapter, _) = checkpoint::load_adapter(path, Some(&base.arch))
        .with_context(|| format!("loading adapter checkpoint {}", path.display()))?;
    adapter.check_compatible(base)?;
    Ok(Some(adapter))
}

fn finetune(cfg: &RunConfig) -> Result<()> {
    let base = load_base(cfg)?;
    let refs = cfg.reference.images()?;
    eprintln!("fine-tuning on {} references for {} steps", refs.len(), cfg.finetune.steps);
    let out = train::finetune(&base, &refs, &cfg.finetune)?;
    let path = cfg.adapter_out_path();
    checkpoint::save_adapter(&path, &out.params, &base.arch, cfg.finetune.seed, config_echo(cfg))?;
    write(&cfg.out_dir.join("finetune_loss.csv"), loss_csv(&out.trace))?;
    eprintln!("final loss {:.4}, wrote {}", tail_mean(&out.trace, 10), path.display());
    Ok(())
}

fn write_images(
    dir: &Path,
    x: &Array2<f64>,
    cond: &[Cond],
    cfg: &RunConfig,
    extra: serde_json::Value,
    seed: u64,
) -> Result<()> {
    create_dir(dir)?;
    for (i, (row, c)) in x.rows().into_iter().zip(cond).enumerate() {
        save_png(&dir.join(format!("{i:03}.png")), row)?;
        let mut side = json!({
            "index": i,
            "content": c.content,
            "style": c.style,
            "seed": seed,
            "base": cfg.base_path(),
            "adapter": cfg.adapter,
        });
        snrlab::config::merge(&mut side, extra.clone());
        write_json(&dir.join(format!("{i:03}.json")), &side)?;
    }
    Ok(())
}

fn sample(cfg: &RunConfig) -> Result<()> {
    let base = load_base(cfg)?;
    let adapter = load_adapter(cfg, &base)?;
    let style = cfg.reference.style;
    let (scores, x) = experiments::evaluate(&base, adapter.as_ref(), style, &cfg.eval)?;
    let cond = experiments::style_conditions(Some(style), cfg.eval.samples);
    let gen = cfg.eval.generation;
    write_images(
        &cfg.out_dir.join("samples"),
        &x,
        &cond,
        cfg,
        json!({ "generation": gen }),
        gen.seed,
    )?;
    let csv = format!(
        "style,samples,seed,guidance_scale,style_score,content_score\n{style},{},{},{},{},{}\n",
        cfg.eval.samples, gen.seed, gen.guidance_scale, scores.style_score, scores.content_score
    );
    write(&cfg.out_dir.join("sample_metrics.csv"), csv)?;
    eprintln!("style {:.4}, content {:.4}", scores.style_score, scores.content_score);
    Ok(())
}

fn switch(cfg: &RunConfig) -> Result<()> {
    let base = load_base(cfg)?;
    let adapter = load_adapter(cfg, &base)?;
    let sw = &cfg.switch;
    let rows = experiments::switch_grid(&base, adapter.as_ref(), sw)?;
    let late = experiments::style_conditions(Some(sw.style), sw.samples);
    let mut csv = String::from("fraction,early_steps,seed,style_score,content_score\n");
    for (row, x) in &rows {
        let extra = json!({
            "generation": sw.generation,
            "switch_fraction": row.fraction,
            "early_steps": row.early_steps,
            "early_condition": "style withheld",
        });
        let dir = cfg.out_dir.join("switch").join(format!("f{}", row.fraction));
        write_images(&dir, x, &late, cfg, extra, row.seed)?;
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.fraction, row.early_steps, row.seed, row.scores.style_score, row.scores.content_score
        )
        .unwrap();
        eprintln!("f={}: style {:.4}", row.fraction, row.scores.style_score);
    }
    write(&cfg.out_dir.join("switch_metrics.csv"), csv)
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let base = load_base(cfg)?;
    let path = cfg.out_dir.join("ablation.csv");
    let mut csv = String::from("mean,std,rank,seed,style_score,content_score,final_loss,seconds\n");
    for cell in cfg.ablate.cells() {
        let row = experiments::ablation_cell(&base, &cfg.reference, &cfg.finetune, &cfg.eval, cell)?;
        let r = &row.run;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{:.3}",
            row.mean, row.std, row.rank, r.seed, r.scores.style_score, r.scores.content_score, r.final_loss, r.seconds
        )
        .unwrap();
        eprintln!(
            "mu={} sigma={} rank={} seed={}: style {:.4}",
            row.mean, row.std, row.rank, r.seed, r.scores.style_score
        );
        // rewrite after every cell so partial grids survive interruption
        write(&path, &csv)?;
    }
    write(&path, &csv)
}

fn export_set(dir: &Path, images: &[DataPoint]) -> Result<Vec<serde_json::Value>> {
    create_dir(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let file = format!("{i:05}.png");
            save_png(&dir.join(&file), d.x0.view())?;
            Ok(json!({ "file": file, "content_id": d.content_id, "style_id": d.style_id }))
        })
        .collect()
}

fn export_corpus(cfg: &RunConfig) -> Result<()> {
    let c = &cfg.corpus;
    let corpus = StyleCorpus::pretraining(c.labeled_per_pair, c.labeled_seed)?;
    let refs = StyleCorpus::reference(cfg.reference.style, cfg.reference.per_content, cfg.reference.seed)?;
    let dir = cfg.out_dir.join("corpus");
    let manifest = json!({
        "canvas": corpus.canvas,
        "contents": corpus.contents,
        "styles": corpus.styles,
        "corpus": {
            "seed": corpus.seed,
            "per_pair": corpus.per_pair,
            "included_styles": corpus.included_styles,
            "images": export_set(&dir.join("train"), &corpus.images)?,
        },
        "reference": {
            "seed": refs.seed,
            "per_content": refs.per_pair,
            "style": cfg.reference.style,
            "images": export_set(&dir.join("reference"), &refs.images)?,
        },
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} + {} images to {}", corpus.len(), refs.len(), dir.display());
    Ok(())
}
