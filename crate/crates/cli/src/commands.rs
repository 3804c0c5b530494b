use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kilnmap_core::arch::{self, build_network, load_checkpoint, Network, NetworkConfig};
use kilnmap_core::dataset::{synth_generate, ChipSet, ClassLabel, Manifest, Split, SynthOptions};
use kilnmap_core::eval::{self, write_metrics_csv};
use kilnmap_core::export::{self, build_heatmap, write_detections_geojson, write_heatmap_pgm};
use kilnmap_core::geo::{self, children_z20, CoordMode, TileId};
use kilnmap_core::gradcheck::op_suite;
use kilnmap_core::train::{train, TrainConfig};

use crate::{
    Cli, Command, EvalArgs, ExportCommand, GeojsonArgs, GlobalArgs, GradcheckArgs, HeatmapArgs, InferArgs, Invalid,
    ModelArgs, ParamCountArgs, ProbsArgs, SynthArgs, TilesCommand, TilesExpandArgs, TrainArgs,
};

/// Converts a core error into an `anyhow` error that keeps its category.
trait CoreExt<T> {
    fn core(self) -> Result<T>;
}

impl<T, E: Into<kilnmap_core::Error>> CoreExt<T> for std::result::Result<T, E> {
    fn core(self) -> Result<T> {
        self.map_err(|e| anyhow::Error::new(e.into()))
    }
}

macro_rules! invalid {
    ($($t:tt)*) => {
        anyhow::Error::new(Invalid(format!($($t)*)))
    };
}

fn note(global: &GlobalArgs, msg: impl AsRef<str>) {
    if !global.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(invalid!("--threads must be at least 1"));
    }
    // A second initialisation (library callers running several commands)
    // keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(g.threads).build_global();
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Train(a) => train_cmd(g, a),
        Command::Eval(a) => eval_cmd(g, a),
        Command::Infer(a) => infer(g, a),
        Command::ParamCount(a) => param_count(g, a),
        Command::Gradcheck(a) => gradcheck(g, a),
        Command::Tiles(TilesCommand::Expand(a)) => tiles_expand(g, a),
        Command::Export(ExportCommand::Heatmap(a)) => heatmap(g, a),
        Command::Export(ExportCommand::Geojson(a)) => geojson(g, a),
    }
}

fn synth(g: &GlobalArgs, a: &SynthArgs) -> Result<()> {
    let opts = SynthOptions::new(a.per_class, a.chip_size, g.seed);
    let m = synth_generate(&a.out, &opts).core()?;
    note(
        g,
        format!(
            "wrote {} chips ({} train, {} val, {} test) to {}",
            m.len(),
            m.split_len(Split::Train),
            m.split_len(Split::Val),
            m.split_len(Split::Test),
            a.out.display()
        ),
    );
    Ok(())
}

fn network_config(m: &ModelArgs, input_size: usize) -> NetworkConfig {
    NetworkConfig {
        residual_scale: m.residual_scale,
        dropout: m.dropout,
        stem: m.stem.into(),
        ..NetworkConfig::new(m.blocks[0], m.blocks[1], m.blocks[2], m.width).with_input_size(input_size)
    }
}

fn train_cmd(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest).core()?;
    let train_set = ChipSet::load(&manifest, Split::Train).core()?;
    let val_set = ChipSet::load(&manifest, Split::Val).core()?;
    if train_set.is_empty() {
        return Err(invalid!("manifest {} has no train chips", a.manifest.display()));
    }
    let cfg = network_config(&a.model, train_set.chip_size());
    let network = build_network(&cfg, g.seed).core()?;
    note(
        g,
        format!(
            "network ({},{},{}) width {} on {}px chips: {} parameters, {} stem",
            cfg.n_a,
            cfg.n_b,
            cfg.n_c,
            cfg.width,
            cfg.input_size,
            network.param_count(),
            if network.uses_full_stem() { "full" } else { "desk" }
        ),
    );
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: g.seed,
        checkpoint_every: a.checkpoint_every,
        augment: a.augment.into(),
        record_time: a.record_time,
    };
    let outcome = train(network, &train_set, &val_set, &config, Some(&a.out), |r| {
        note(
            g,
            format!(
                "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            ),
        )
    })
    .core()?;
    note(
        g,
        format!("best epoch {}; checkpoints in {}", outcome.best_epoch, a.out.display()),
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<Network> {
    load_checkpoint(path).core()
}

fn eval_cmd(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    let network = load_net(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest).core()?;
    let set = ChipSet::load(&manifest, a.split.into()).core()?;
    if set.is_empty() {
        return Err(invalid!("split {:?} of {} is empty", a.split, a.manifest.display()));
    }
    if a.batch_size == 0 {
        return Err(invalid!("--batch-size must be at least 1"));
    }
    let reports = eval::evaluate_network(&network, &set, &a.thresholds, a.batch_size).core()?;
    write_metrics_csv(&reports, &a.out).core()?;
    for r in &reports {
        let f = |v: Option<f64>| v.map_or_else(|| eval::UNDEFINED.to_string(), |v| format!("{v:.4}"));
        note(
            g,
            format!(
                "threshold {}: precision {} recall {} f1 {}",
                r.threshold,
                f(r.precision),
                f(r.recall),
                f(r.f1)
            ),
        );
    }
    Ok(())
}

fn infer(g: &GlobalArgs, a: &InferArgs) -> Result<()> {
    let network = load_net(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest).core()?;
    if a.batch_size == 0 {
        return Err(invalid!("--batch-size must be at least 1"));
    }
    let splits: Vec<Split> = match a.split {
        Some(s) => vec![s.into()],
        None => vec![Split::Train, Split::Val, Split::Test],
    };
    let mut out = String::from("image_path,zoom,tile_x,tile_y,label,split");
    for c in ClassLabel::ALL {
        write!(out, ",p_{}", c.as_str()).unwrap();
    }
    out.push('\n');
    let mut rows = 0;
    for split in splits {
        let set = ChipSet::load(&manifest, split).core()?;
        if set.is_empty() {
            continue;
        }
        let probs = eval::predict_set(&network, &set, a.batch_size).core()?;
        let k = probs.shape()[1];
        for (rec, row) in manifest.split_records(split).zip(probs.data().chunks_exact(k)) {
            write!(
                out,
                "{},{},{},{},{},{}",
                rec.image_path,
                rec.zoom,
                rec.tile_x,
                rec.tile_y,
                rec.label.as_str(),
                rec.split.as_str()
            )
            .unwrap();
            for p in row {
                write!(out, ",{p}").unwrap();
            }
            out.push('\n');
            rows += 1;
        }
    }
    write_file(&a.out, &out)?;
    note(g, format!("wrote {rows} rows to {}", a.out.display()));
    Ok(())
}

fn param_count(g: &GlobalArgs, a: &ParamCountArgs) -> Result<()> {
    let cfg = NetworkConfig {
        stem: a.stem.into(),
        ..NetworkConfig::new(a.blocks[0], a.blocks[1], a.blocks[2], a.width)
            .with_classes(a.classes)
            .with_input_size(a.input_size)
    };
    let net = build_network(&cfg, g.seed).core()?;
    let stages = net.describe();
    let mut csv = String::from("stage,kind,output,params\n");
    let mut table = format!("{:<14} {:<12} {:>16} {:>12}\n", "stage", "kind", "output", "params");
    for s in &stages {
        let shape = s.output.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let kind = format!("{:?}", s.kind);
        writeln!(csv, "{},{kind},{shape},{}", s.name, s.params).unwrap();
        writeln!(table, "{:<14} {:<12} {:>16} {:>12}", s.name, kind, shape, s.params).unwrap();
    }
    println!("{}", net.param_count());
    if !g.quiet {
        print!("{table}");
    }
    if let Some(path) = &a.out {
        write_file(path, &csv)?;
    }
    Ok(())
}

fn gradcheck(g: &GlobalArgs, a: &GradcheckArgs) -> Result<()> {
    if a.trials == 0 {
        return Err(invalid!("--trials must be at least 1"));
    }
    if !(a.eps > 0.0 && a.tolerance > 0.0) {
        return Err(invalid!("--eps and --tolerance must be positive"));
    }
    let mut rows: Vec<(String, usize, usize, f64)> = op_suite(a.trials, a.eps, g.seed)
        .core()?
        .into_iter()
        .map(|c| (c.name.to_string(), c.trials, c.report.checked, c.report.max_rel_error))
        .collect();
    if a.network {
        let r = arch::tiny_network_gradcheck(a.eps, g.seed).core()?;
        rows.push(("network_1_1_1".into(), 1, r.checked, r.max_rel_error));
    }
    let mut csv = String::from("op,trials,checked,max_rel_error,pass\n");
    let mut failed = Vec::new();
    for (name, trials, checked, err) in &rows {
        let pass = *err < a.tolerance;
        if !pass {
            failed.push(name.clone());
        }
        writeln!(csv, "{name},{trials},{checked},{err:e},{pass}").unwrap();
        note(
            g,
            format!("{:<24} {:>10.3e}  {}", name, err, if pass { "ok" } else { "FAIL" }),
        );
    }
    if let Some(path) = &a.out {
        write_file(path, &csv)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("gradient check failed for {}", failed.join(", "))
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| invalid!("{}: missing column {name:?}", path.display()))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, row: usize, path: &Path) -> Result<T> {
    let v = rec.get(idx).unwrap_or("");
    v.parse()
        .map_err(|_| invalid!("{} row {row}: {name} {v:?} is not valid", path.display()))
}

fn tiles_expand(g: &GlobalArgs, a: &TilesExpandArgs) -> Result<()> {
    let mut reader = csv_reader(&a.input)?;
    let headers = reader
        .headers()
        .map_err(|e| invalid!("{}: {e}", a.input.display()))?
        .clone();
    let (cx, cy) = (
        column(&headers, "tile_x", &a.input)?,
        column(&headers, "tile_y", &a.input)?,
    );
    let cz = headers.iter().position(|h| h == "zoom");
    let mode: CoordMode = a.mode.into();
    let mut out = String::from("parent_x,parent_y,zoom,tile_x,tile_y,lat,lon,coordinate_mode\n");
    let mut parents = 0;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| invalid!("{} row {row}: {e}", a.input.display()))?;
        if let Some(cz) = cz {
            let z: u8 = field(&rec, cz, "zoom", row, &a.input)?;
            if z != 17 {
                return Err(invalid!("{} row {row}: zoom {z}, expected 17", a.input.display()));
            }
        }
        let x: u32 = field(&rec, cx, "tile_x", row, &a.input)?;
        let y: u32 = field(&rec, cy, "tile_y", row, &a.input)?;
        let parent = TileId::new(17, x, y).core()?;
        for child in children_z20(parent).core()? {
            let p = geo::chip_point(child, mode).core()?;
            writeln!(
                out,
                "{x},{y},{},{},{},{},{},{mode}",
                child.zoom, child.x, child.y, p.lat, p.lon
            )
            .unwrap();
        }
        parents += 1;
    }
    write_file(&a.out, &out)?;
    note(
        g,
        format!(
            "expanded {parents} zoom-17 tiles into {} chips",
            geo::expanded_chip_count(parents as u64)
        ),
    );
    Ok(())
}

/// Kiln probability per zoom-20 chip, combining repeated rows.
fn read_probs(a: &ProbsArgs) -> Result<BTreeMap<TileId, f64>> {
    let path = &a.probs;
    let mut reader = csv_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| invalid!("{}: {e}", path.display()))?
        .clone();
    let cz = column(&headers, "zoom", path)?;
    let cx = column(&headers, "tile_x", path)?;
    let cy = column(&headers, "tile_y", path)?;
    let cp = column(&headers, "p_brick_kiln", path)?;
    let mut obs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| invalid!("{} row {row}: {e}", path.display()))?;
        let tile = TileId::new(
            field(&rec, cz, "zoom", row, path)?,
            field(&rec, cx, "tile_x", row, path)?,
            field(&rec, cy, "tile_y", row, path)?,
        )
        .core()?;
        obs.push((tile, field(&rec, cp, "p_brick_kiln", row, path)?));
    }
    export::aggregate(&obs, a.aggregation.into()).core()
}

fn heatmap(g: &GlobalArgs, a: &HeatmapArgs) -> Result<()> {
    let mut probs = read_probs(&a.source)?;
    let parents: BTreeSet<TileId> = probs
        .keys()
        .map(|t| t.parent_z17())
        .collect::<std::result::Result<_, _>>()
        .core()?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for &parent in &parents {
        if a.fill_missing {
            for child in children_z20(parent).core()? {
                probs.entry(child).or_insert(0.0);
            }
        }
        let grid = build_heatmap(parent, &probs).core()?;
        let path = a.out_dir.join(format!("heatmap_17_{}_{}.pgm", parent.x, parent.y));
        write_heatmap_pgm(&grid, &path).core()?;
    }
    note(
        g,
        format!("wrote {} heatmaps to {}", parents.len(), a.out_dir.display()),
    );
    Ok(())
}

fn geojson(g: &GlobalArgs, a: &GeojsonArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(invalid!("--threshold must lie in [0, 1], got {}", a.threshold));
    }
    let probs = read_probs(&a.source)?;
    let dets = export::detections(&probs, a.threshold, a.mode.into()).core()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_detections_geojson(&dets, &a.out, a.mode.into()).core()?;
    note(g, format!("wrote {} detections to {}", dets.len(), a.out.display()));
    Ok(())
}
