//! Text formats: scene files, checkpoints, metrics CSV, prediction dumps,
//! suite manifests and the evaluation report. All floats are written with
//! Rust's shortest-roundtrip formatting, so emit -> parse is exact and
//! identical inputs produce byte-identical files.
//!
//! Scene file: one header line `N I S`, then `N` lines
//! `x y z f1 .. fI sem inst`, space-separated, LF line endings.
//!
//! Checkpoint: `otinst-ckpt 1` magic, `step`/`seed`/`net` lines, then named
//! arrays (`array <name> <rows> <cols>` followed by `rows` lines of `cols`
//! values). Optimiser moments ride along as `adam.m` / `adam.v`.
//!
//! Prediction dump: one line per instance `category score idx_count idx..`.

use crate::error::{Error, Result};
use crate::eval::{fit_box, EvalReport, InstancePrediction};
use crate::net::{NetConfig, NetworkParams};
use crate::scene::Scene;
use crate::train::StepReport;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_num<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T> {
    tok.parse::<T>().map_err(|_| format_err(format!("cannot parse {what} from `{tok}`")))
}

/// Serialises a scene in the line-oriented text format.
pub fn scene_to_string(scene: &Scene) -> String {
    let classes = scene.semantic().iter().copied().max().unwrap_or(0) + 1;
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {}", scene.len(), scene.n_features(), classes);
    for i in 0..scene.len() {
        let c = scene.coord(i);
        let _ = write!(out, "{} {} {}", c[0], c[1], c[2]);
        for f in scene.features_of(i) {
            let _ = write!(out, " {f}");
        }
        let _ = writeln!(out, " {} {}", scene.semantic()[i], scene.instance()[i]);
    }
    out
}

/// Parses the scene text format; `id` names the scene (usually the file
/// stem).
pub fn scene_from_str(text: &str, id: &str) -> Result<Scene> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err("empty scene file"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(format_err(format!("scene header must be `N I S`, got `{header}`")));
    }
    let n: usize = parse_num(head[0], "N")?;
    let n_features: usize = parse_num(head[1], "I")?;
    let classes: u32 = parse_num(head[2], "S")?;
    let mut coords = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * n_features);
    let mut semantic = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 + n_features + 2 {
            return Err(format_err(format!(
                "scene line {}: expected {} fields, got {}",
                lineno + 2,
                3 + n_features + 2,
                toks.len()
            )));
        }
        coords.push([
            parse_num::<f64>(toks[0], "x")?,
            parse_num::<f64>(toks[1], "y")?,
            parse_num::<f64>(toks[2], "z")?,
        ]);
        for f in &toks[3..3 + n_features] {
            features.push(parse_num::<f64>(f, "feature")?);
        }
        let sem: u32 = parse_num(toks[3 + n_features], "semantic id")?;
        if sem >= classes {
            return Err(format_err(format!("semantic id {sem} outside [0, {classes})")));
        }
        semantic.push(sem);
        instance.push(parse_num(toks[3 + n_features + 1], "instance id")?);
    }
    if coords.len() != n {
        return Err(format_err(format!("scene declares {n} points but has {}", coords.len())));
    }
    Scene::new(id, coords, features, n_features, semantic, instance)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_string(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
    let text = std::fs::read_to_string(path)?;
    scene_from_str(&text, &id)
}

const CKPT_MAGIC: &str = "otinst-ckpt 1";

/// Serialises parameters (and optionally optimiser moments) as named arrays.
pub fn checkpoint_to_string(
    params: &NetworkParams,
    adam: Option<(&[f64], &[f64])>,
    step: usize,
    seed: u64,
) -> String {
    let cfg = &params.cfg;
    let mut out = String::new();
    let _ = writeln!(out, "{CKPT_MAGIC}");
    let _ = writeln!(out, "step {step}");
    let _ = writeln!(out, "seed {seed}");
    let _ = writeln!(
        out,
        "net {} {} {} {} {} {}",
        cfg.input_features,
        cfg.encoder_hidden,
        cfg.d_backbone,
        cfg.d_mask,
        cfg.decoder_hidden,
        cfg.classes
    );
    let mut write_array = |name: &str, rows: usize, cols: usize, data: &[f64]| {
        let _ = writeln!(out, "array {name} {rows} {cols}");
        for row in data.chunks(cols.max(1)) {
            let mut line = String::new();
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{v}");
            }
            let _ = writeln!(out, "{line}");
        }
    };
    for def in params.layout() {
        write_array(def.name, def.rows, def.cols, &params.data()[def.range()]);
    }
    if let Some((m, v)) = adam {
        write_array("adam.m", m.len(), 1, m);
        write_array("adam.v", v.len(), 1, v);
    }
    out
}

/// A parsed checkpoint; optimiser state is present only when it was saved.
pub struct Checkpoint {
    pub params: NetworkParams,
    pub adam: Option<(Vec<f64>, Vec<f64>)>,
    pub step: usize,
    pub seed: u64,
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().peekable();
    if lines.next() != Some(CKPT_MAGIC) {
        return Err(format_err(format!("missing checkpoint magic `{CKPT_MAGIC}`")));
    }
    let mut step = 0usize;
    let mut seed = 0u64;
    let mut cfg: Option<NetConfig> = None;
    let mut arrays: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    while let Some(line) = lines.next() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["step", v] => step = parse_num(v, "step")?,
            ["seed", v] => seed = parse_num(v, "seed")?,
            ["net", i, h, db, dm, dh, s] => {
                cfg = Some(NetConfig {
                    input_features: parse_num(i, "input_features")?,
                    encoder_hidden: parse_num(h, "encoder_hidden")?,
                    d_backbone: parse_num(db, "d_backbone")?,
                    d_mask: parse_num(dm, "d_mask")?,
                    decoder_hidden: parse_num(dh, "decoder_hidden")?,
                    classes: parse_num(s, "classes")?,
                });
            }
            ["array", name, rows, cols] => {
                let rows: usize = parse_num(rows, "rows")?;
                let cols: usize = parse_num(cols, "cols")?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let row = lines
                        .next()
                        .ok_or_else(|| format_err(format!("array {name}: missing rows")))?;
                    for tok in row.split_whitespace() {
                        data.push(parse_num::<f64>(tok, "array value")?);
                    }
                }
                if data.len() != rows * cols {
                    return Err(format_err(format!(
                        "array {name}: expected {} values, got {}",
                        rows * cols,
                        data.len()
                    )));
                }
                arrays.push((name.to_string(), rows, cols, data));
            }
            [] => {}
            _ => return Err(format_err(format!("unrecognised checkpoint line `{line}`"))),
        }
    }
    let cfg = cfg.ok_or_else(|| format_err("checkpoint missing `net` line"))?;
    let mut params = NetworkParams::zeros(cfg);
    for def in params.layout().to_vec() {
        let found = arrays
            .iter()
            .find(|(name, ..)| name == def.name)
            .ok_or_else(|| format_err(format!("checkpoint missing array {}", def.name)))?;
        if (found.1, found.2) != (def.rows, def.cols) {
            return Err(format_err(format!(
                "array {}: shape {}x{} does not match config {}x{}",
                def.name, found.1, found.2, def.rows, def.cols
            )));
        }
        params.data_mut()[def.range()].copy_from_slice(&found.3);
    }
    let adam_m = arrays.iter().find(|(n, ..)| n == "adam.m").map(|a| a.3.clone());
    let adam_v = arrays.iter().find(|(n, ..)| n == "adam.v").map(|a| a.3.clone());
    let adam = match (adam_m, adam_v) {
        (Some(m), Some(v)) => {
            if m.len() != params.n_params() || v.len() != params.n_params() {
                return Err(format_err("optimiser state length mismatch"));
            }
            Some((m, v))
        }
        (None, None) => None,
        _ => return Err(format_err("checkpoint has only one of adam.m / adam.v")),
    };
    Ok(Checkpoint { params, adam, step, seed })
}

pub fn save_checkpoint(
    path: &Path,
    params: &NetworkParams,
    adam: Option<(&[f64], &[f64])>,
    step: usize,
    seed: u64,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params, adam, step, seed))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

/// Training metrics as CSV, one row per step.
pub fn metrics_csv(reports: &[StepReport]) -> String {
    let mut out = String::from(
        "step,loss_total,loss_aux,loss_main,loss_semantic,loss_offset,w_a,n_background_assigned,sinkhorn_converged\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.loss_total,
            r.loss_aux,
            r.loss_main,
            r.loss_semantic,
            r.loss_offset,
            r.w_a,
            r.n_background_assigned,
            u8::from(r.sinkhorn_converged)
        );
    }
    out
}

/// Prediction dump: `category score idx_count idx1 idx2 ..` per instance.
pub fn predictions_to_string(preds: &[InstancePrediction]) -> String {
    let mut out = String::new();
    for p in preds {
        let _ = write!(out, "{} {} {}", p.category, p.score, p.foreground());
        for (i, v) in p.mask.iter().enumerate() {
            if *v == 1.0 {
                let _ = write!(out, " {i}");
            }
        }
        out.push('\n');
    }
    out
}

/// Parses a prediction dump against its scene (mask width and box fitting
/// need the coordinates).
pub fn predictions_from_str(text: &str, scene: &Scene) -> Result<Vec<InstancePrediction>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(format_err(format!("prediction line {}: too few fields", lineno + 1)));
        }
        let category: u32 = parse_num(toks[0], "category")?;
        let score: f64 = parse_num(toks[1], "score")?;
        let count: usize = parse_num(toks[2], "idx_count")?;
        if toks.len() != 3 + count {
            return Err(format_err(format!(
                "prediction line {}: declares {count} indices, has {}",
                lineno + 1,
                toks.len() - 3
            )));
        }
        let mut mask = vec![0.0; scene.len()];
        for tok in &toks[3..] {
            let idx: usize = parse_num(tok, "point index")?;
            if idx >= scene.len() {
                return Err(format_err(format!(
                    "prediction line {}: index {idx} outside scene of {} points",
                    lineno + 1,
                    scene.len()
                )));
            }
            mask[idx] = 1.0;
        }
        let bbox = fit_box(scene.coords(), &mask)
            .map_err(|_| format_err(format!("prediction line {}: empty mask", lineno + 1)))?;
        out.push(InstancePrediction { mask, score, category, bbox });
    }
    Ok(out)
}

/// Manifest: one scene path per line, relative to the manifest's directory.
pub fn write_manifest(path: &Path, scene_files: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = String::new();
    for file in scene_files {
        let rel = file.strip_prefix(base).unwrap_or(file);
        let _ = writeln!(out, "{}", rel.display());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| base.join(l.trim()))
        .collect())
}

pub fn load_manifest_scenes(path: &Path) -> Result<Vec<Scene>> {
    read_manifest(path)?.iter().map(|p| load_scene(p)).collect()
}

/// Evaluation report as CSV rows `metric,value` plus per-class AP rows.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    let rows = [
        ("mAP", report.map),
        ("AP@50", report.ap50),
        ("AP@25", report.ap25),
        ("mCov", report.mcov),
        ("mWCov", report.mwcov),
        ("mPrec", report.mprec),
        ("mRec", report.mrec),
        ("detection_AP@50", report.detection_ap50),
    ];
    for (name, value) in rows {
        let _ = writeln!(out, "{name},{value}");
    }
    for class_ap in &report.per_class {
        for (thr, ap) in &class_ap.ap_at {
            let _ = writeln!(out, "class_{}_AP@{},{}", class_ap.class, thr, ap);
        }
    }
    out
}

/// Human-readable metric table.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>8}", "metric", "value");
    let _ = writeln!(out, "{:-<18} {:->8}", "", "");
    let rows = [
        ("mAP", report.map),
        ("AP@50", report.ap50),
        ("AP@25", report.ap25),
        ("mCov", report.mcov),
        ("mWCov", report.mwcov),
        ("mPrec", report.mprec),
        ("mRec", report.mrec),
        ("detection AP@50", report.detection_ap50),
    ];
    for (name, value) in rows {
        let _ = writeln!(out, "{name:<18} {value:>8.4}");
    }
    out
}
