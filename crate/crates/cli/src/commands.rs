use crate::config::{echo_and_store, RunConfig};
use crate::data::{self, read_pairs, StoredPair};
use crate::ConfigArgs;
use anyhow::{bail, Context, Result};
use sgareg_core::gradcheck::Suite;
use sgareg_core::io;
use sgareg_core::metrics::{mean_dice, njd_percent, MetricReport};
use sgareg_core::network::{label_transform, train_with, EpochLoss, RegistrationModel, TrainOptions, TrainPair};
use sgareg_core::ssaformer::{bench_mixer, BenchRow, MixerKind};
use sgareg_core::synth::{make_pair_with, PairOptions};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CHECKPOINT_FILE: &str = "checkpoint.hsgk";
pub const LOSS_FILE: &str = "loss.csv";

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| anyhow::anyhow!("invalid {what} entry {v:?} in {s:?}")))
        .collect()
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = parse_list("dims", s)?;
    match v[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => bail!("--dims takes one edge length or D,H,W, got {s:?}"),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(
    seed: u64,
    dims: &str,
    pairs: usize,
    out: &Path,
    amplitude: Option<f64>,
    smoothness: Option<f64>,
    labels: Option<usize>,
) -> Result<()> {
    let dims = parse_dims(dims)?;
    let defaults = PairOptions::default();
    let opts = PairOptions {
        num_labels: labels.unwrap_or(defaults.num_labels),
        amplitude: amplitude.unwrap_or(defaults.amplitude),
        smoothness: smoothness.unwrap_or(defaults.smoothness),
    };
    let mut cfg = String::new();
    writeln!(cfg, "seed={seed}")?;
    writeln!(cfg, "dims={},{},{}", dims[0], dims[1], dims[2])?;
    writeln!(cfg, "pairs={pairs}")?;
    writeln!(cfg, "labels={}", opts.num_labels)?;
    writeln!(cfg, "amplitude={:?}", opts.amplitude)?;
    writeln!(cfg, "smoothness={:?}", opts.smoothness)?;
    echo_and_store(&cfg, out)?;
    let mut table = String::from("pair_id,baseline_dice\n");
    for i in 0..pairs {
        let pair = make_pair_with(seed.wrapping_add(i as u64), dims, opts)?;
        let dir = data::pair_dir(out, i);
        data::write_pair(&dir, &pair)?;
        writeln!(table, "pair_{i:03},{}", pair.baseline_dice)?;
        println!("pair_{i:03} baseline_dice={:.4}", pair.baseline_dice);
    }
    write_text(&out.join("pairs.csv"), &table)
}

fn resolve(cfg: &ConfigArgs, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(RunConfig, PathBuf, PathBuf)> {
    let mut run = RunConfig::resolve(cfg.config.as_deref(), &cfg.set)?;
    if let Some(s) = cfg.seed {
        run.seed = s;
    }
    if let Some(e) = cfg.epochs {
        run.epochs = e;
    }
    if data.is_some() {
        run.data = data;
    }
    if out.is_some() {
        run.out = out;
    }
    let data = run.data.clone().context("no data directory (pass --data or set data= in the config)")?;
    let out = run.out.clone().context("no output directory (pass --out or set out= in the config)")?;
    Ok((run, data, out))
}

fn train_pairs(pairs: &[StoredPair]) -> Vec<TrainPair> {
    pairs.iter().map(|p| p.images.clone()).collect()
}

fn train_model(run: &RunConfig, model: &mut RegistrationModel, pairs: &[TrainPair]) -> Result<Vec<EpochLoss>> {
    println!("{}", EpochLoss::CSV_HEADER);
    let history = train_with(model, pairs, TrainOptions::new(run.epochs, run.seed), |e| println!("{}", e.to_csv()))?;
    Ok(history)
}

fn loss_csv(history: &[EpochLoss]) -> String {
    let mut s = format!("{}\n", EpochLoss::CSV_HEADER);
    for e in history {
        s.push_str(&e.to_csv());
        s.push('\n');
    }
    s
}

pub fn train(cfg: &ConfigArgs, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let (run, data, out) = resolve(cfg, data, out)?;
    echo_and_store(&run.to_text(), &out)?;
    let pairs = read_pairs(&data)?;
    let mut model = RegistrationModel::new(run.network.clone(), run.seed)?;
    println!("# parameters: {}", model.param_count());
    let history = train_model(&run, &mut model, &train_pairs(&pairs))?;
    write_text(&out.join(LOSS_FILE), &loss_csv(&history))?;
    io::write_checkpoint(out.join(CHECKPOINT_FILE), &model)?;
    println!("# wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn register(checkpoint: &Path, moving: &Path, fixed: &Path, out: &Path, moving_labels: Option<&Path>) -> Result<()> {
    let model = io::read_checkpoint(checkpoint)?;
    let mut cfg = format!("checkpoint={}\nmoving={}\nfixed={}\n", checkpoint.display(), moving.display(), fixed.display());
    cfg.push_str(&model.config().to_kv());
    echo_and_store(&cfg, out)?;
    let m = io::read_volume(moving)?;
    let f = io::read_volume(fixed)?;
    let start = Instant::now();
    let (warped, field) = model.forward(&m, &f).with_context(|| format!("registering {}", moving.display()))?;
    let elapsed = start.elapsed();
    io::write_volume(out.join("warped.rvf"), &warped)?;
    io::write_field(out.join("field.rvf"), &field)?;
    if let Some(path) = moving_labels {
        let labels = io::read_labels(path)?;
        io::write_labels(out.join("warped_labels.rvf"), &label_transform(&labels, &field)?)?;
    }
    println!("wall_time_s={:.6}", elapsed.as_secs_f64());
    Ok(())
}

pub fn eval(fixed_labels: &Path, moving_labels: &Path, field: &Path, pair_id: &str, out: Option<&Path>) -> Result<()> {
    let fixed = io::read_labels(fixed_labels)?;
    let moving = io::read_labels(moving_labels)?;
    let field = io::read_field(field)?;
    let warped = label_transform(&moving, &field)?;
    let report = MetricReport::evaluate(&fixed, &warped, &field)?;
    let mut csv = format!("{}\n", MetricReport::CSV_HEADER);
    for row in report.csv_rows(pair_id) {
        csv.push_str(&row);
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(path) = out {
        write_text(path, &csv)?;
    }
    Ok(())
}

pub fn bench(kind: &str, k_list: &str, d: usize, heads: usize, repeats: usize) -> Result<()> {
    let kinds = match kind {
        "both" => vec![MixerKind::Ssa, MixerKind::Mha],
        other => vec![other.parse()?],
    };
    let ks: Vec<usize> = parse_list("k", k_list)?;
    println!("{}", BenchRow::CSV_HEADER);
    for &k in &ks {
        for &kind in &kinds {
            let row = bench_mixer(kind, k, d, heads, repeats, k as u64)?;
            println!("{}", row.to_csv());
        }
    }
    Ok(())
}

pub fn sweep_k(k_list: &str, cfg: &ConfigArgs, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let ks: Vec<usize> = parse_list("k", k_list)?;
    let (run, data, out) = resolve(cfg, data, out)?;
    let mut text = format!("k_list={k_list}\n");
    text.push_str(&run.to_text());
    echo_and_store(&text, &out)?;
    let pairs = read_pairs(&data)?;
    let images = train_pairs(&pairs);
    let mut table = String::from("k,dice_mean,njd_percent,final_total_loss\n");
    for k in ks {
        let mut k_run = run.clone();
        k_run.network = k_run.network.with_uniform_stride(k);
        println!("# K = {k}");
        let mut model = RegistrationModel::new(k_run.network.clone(), k_run.seed)?;
        let history = train_model(&k_run, &mut model, &images)?;
        let (mut dice, mut njd) = (0.0, 0.0);
        for p in &pairs {
            let field = model.register(&p.images.moving, &p.images.fixed)?;
            let d = mean_dice(&p.fixed_labels, &label_transform(&p.moving_labels, &field)?)?;
            let j = njd_percent(&field);
            println!("# {} dice_mean={d:.4} njd_percent={j:.4}", p.id);
            dice += d;
            njd += j;
        }
        let n = pairs.len() as f64;
        let last = history.last().map_or(f64::NAN, |e| e.total);
        writeln!(table, "{k},{},{},{last}", dice / n, njd / n)?;
        let dir = out.join(format!("k_{k}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_text(&dir.join(LOSS_FILE), &loss_csv(&history))?;
        io::write_checkpoint(dir.join(CHECKPOINT_FILE), &model)?;
    }
    print!("{table}");
    write_text(&out.join("sweep_k.csv"), &table)
}

pub fn grad_check(module: &str) -> Result<()> {
    let mut failed = 0;
    for suite in Suite::parse_list(module)? {
        println!("# {}", suite.name());
        for r in suite.run()? {
            println!("{}", r.summary());
            failed += usize::from(!r.passed());
        }
    }
    if failed > 0 {
        bail!("{failed} gradient check(s) failed");
    }
    Ok(())
}
