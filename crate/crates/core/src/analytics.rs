//! Policy statistics: per-block skip ratios, trace files, per-sample policy
//! grids and the dimension-ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ValidConfig;
use crate::controller::{DimensionSet, MaskBundle};
use crate::data::Splits;
use crate::error::{MiaError, Result};
use crate::model::{Policy, SampleTrace};
use crate::train::log::{read_csv, RunLog};
use crate::train::stages::{cotrain, evaluate, finetune_rl};
use crate::train::state::{Stage, TrainState};

/// Skip frequencies of one block. Head and token ratios average over the
/// samples that executed the block and are empty when none did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRatio {
    pub block: usize,
    pub samples: usize,
    pub executed: usize,
    pub block_skip: f64,
    pub head_skip: Option<f64>,
    pub token_skip: Option<f64>,
}

pub fn skip_ratio_stats(traces: &[SampleTrace], cfg: &ValidConfig) -> Result<Vec<SkipRatio>> {
    if traces.is_empty() {
        return Err(MiaError::Invalid("skip ratios of an empty trace set".into()));
    }
    for t in traces {
        check_trace(t, cfg)?;
    }
    let n = traces.len();
    Ok((0..cfg.num_blocks)
        .map(|l| {
            let run: Vec<&MaskBundle> = traces.iter().map(|t| &t.blocks[l]).filter(|m| !m.is_skipped()).collect();
            let frac = |off: &dyn Fn(&MaskBundle) -> f64| {
                (!run.is_empty()).then(|| run.iter().map(|m| off(m)).sum::<f64>() / run.len() as f64)
            };
            SkipRatio {
                block: l,
                samples: n,
                executed: run.len(),
                block_skip: (n - run.len()) as f64 / n as f64,
                head_skip: frac(&|m| (cfg.num_heads - m.heads_kept()) as f64 / cfg.num_heads as f64),
                token_skip: frac(&|m| (cfg.num_tokens - m.tokens_kept()) as f64 / cfg.num_tokens as f64),
            }
        })
        .collect())
}

fn check_trace(t: &SampleTrace, cfg: &ValidConfig) -> Result<()> {
    if t.blocks.len() != cfg.num_blocks {
        return Err(MiaError::Invalid(format!(
            "trace of sample {} has {} blocks, expected {}",
            t.sample_id,
            t.blocks.len(),
            cfg.num_blocks
        )));
    }
    t.blocks.iter().try_for_each(|m| m.check_shape(cfg))
}

pub fn write_skip_ratios(path: &Path, rows: &[SkipRatio]) -> Result<()> {
    write_rows(path, rows)
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| MiaError::io(path, e))
}

/// One `(sample, block)` row of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample_id: u64,
    pub label: Option<usize>,
    pub predicted: usize,
    pub correct: Option<bool>,
    pub block: usize,
    pub skipped: bool,
    pub g_block: f64,
    pub heads_kept: usize,
    pub tokens_kept: usize,
}

pub fn trace_rows(traces: &[SampleTrace]) -> Vec<TraceRow> {
    traces
        .iter()
        .flat_map(|t| {
            t.blocks.iter().enumerate().map(move |(l, m)| TraceRow {
                sample_id: t.sample_id,
                label: t.label,
                predicted: t.predicted,
                correct: t.correct(),
                block: l,
                skipped: m.is_skipped(),
                g_block: m.g_block,
                heads_kept: m.heads_kept(),
                tokens_kept: m.tokens_kept(),
            })
        })
        .collect()
}

/// Run-length code of a bit mask: `1*3,0*1` for `1110`.
pub fn rle_encode(bits: &[bool]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < bits.len() {
        let j = bits[i..].iter().position(|&b| b != bits[i]).map_or(bits.len(), |k| i + k);
        if !out.is_empty() {
            out.push(',');
        }
        let _ = write!(out, "{}*{}", u8::from(bits[i]), j - i);
        i = j;
    }
    out
}

pub fn rle_decode(text: &str) -> Result<Vec<bool>> {
    let bad = || MiaError::Data(format!("bad run-length mask {text:?}"));
    let mut out = Vec::new();
    for run in text.split(',').filter(|r| !r.is_empty()) {
        let (bit, len) = run.split_once('*').ok_or_else(bad)?;
        let bit = match bit {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        let len: usize = len.parse().map_err(|_| bad())?;
        out.extend(std::iter::repeat_n(bit, len));
    }
    Ok(out)
}

/// Trace CSV plus the `.masks` sidecar holding every head and token mask:
/// one line `sample_id block h=<rle> n=<rle>` per row.
pub fn write_traces(csv_path: &Path, traces: &[SampleTrace]) -> Result<PathBuf> {
    write_rows(csv_path, &trace_rows(traces))?;
    let side = csv_path.with_extension("masks");
    let mut text = String::new();
    for t in traces {
        for (l, m) in t.blocks.iter().enumerate() {
            let _ = writeln!(text, "{} {} h={} n={}", t.sample_id, l, rle_encode(&m.d_heads), rle_encode(&m.d_tokens));
        }
    }
    fs::write(&side, text).map_err(|e| MiaError::io(&side, e))?;
    Ok(side)
}

/// Reads a trace written by [`write_traces`]. Soft head and token values are
/// not stored and come back empty.
pub fn read_traces(csv_path: &Path, cfg: &ValidConfig) -> Result<Vec<SampleTrace>> {
    let rows: Vec<TraceRow> = read_csv(csv_path)?;
    let side = csv_path.with_extension("masks");
    let text = fs::read_to_string(&side).map_err(|e| MiaError::io(&side, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != rows.len() {
        return Err(MiaError::Data(format!(
            "{}: {} mask lines for {} trace rows",
            side.display(),
            lines.len(),
            rows.len()
        )));
    }
    let mut out: Vec<SampleTrace> = Vec::new();
    for (k, (row, line)) in rows.iter().zip(&lines).enumerate() {
        let bad = || MiaError::Data(format!("{} line {}: {line:?}", side.display(), k + 1));
        let parts: Vec<&str> = line.split(' ').collect();
        let [id, block, h, n] = parts.as_slice() else { return Err(bad()) };
        if id.parse::<u64>().ok() != Some(row.sample_id) || block.parse::<usize>().ok() != Some(row.block) {
            return Err(bad());
        }
        let heads = rle_decode(h.strip_prefix("h=").ok_or_else(bad)?)?;
        let tokens = rle_decode(n.strip_prefix("n=").ok_or_else(bad)?)?;
        let bundle = MaskBundle {
            d_block: !row.skipped,
            g_block: row.g_block,
            d_heads: heads,
            g_heads: None,
            d_tokens: tokens,
            g_tokens: None,
        };
        bundle.check_shape(cfg)?;
        if bundle.heads_kept() != row.heads_kept || bundle.tokens_kept() != row.tokens_kept {
            return Err(bad());
        }
        if row.block == 0 {
            out.push(SampleTrace {
                sample_id: row.sample_id,
                blocks: Vec::with_capacity(cfg.num_blocks),
                predicted: row.predicted,
                label: row.label,
            });
        }
        match out.last_mut() {
            Some(t) if t.sample_id == row.sample_id && t.blocks.len() == row.block => t.blocks.push(bundle),
            _ => return Err(bad()),
        }
    }
    for t in &out {
        check_trace(t, cfg)?;
    }
    Ok(out)
}

const CELL: f64 = 60.0;
const GAP: f64 = 12.0;
const MARGIN: f64 = 12.0;
const TEXT: f64 = 16.0;

/// One square per block: the filled part spans `n/N` of the width and `h/H`
/// of the height; skipped blocks are a dashed empty outline.
pub fn policy_grid_svg(trace: &SampleTrace, cfg: &ValidConfig) -> Result<String> {
    check_trace(trace, cfg)?;
    let l = cfg.num_blocks as f64;
    let width = 2.0 * MARGIN + l * CELL + (l - 1.0) * GAP;
    let height = 2.0 * MARGIN + CELL + 2.0 * TEXT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let verdict = match trace.correct() {
        Some(true) => "correct",
        Some(false) => "wrong",
        None => "unlabeled",
    };
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN:.1}" y="{:.1}" font-family="monospace" font-size="11">sample {} predicted {} ({verdict})</text>"#,
        MARGIN + 10.0,
        trace.sample_id,
        trace.predicted
    );
    for (k, m) in trace.blocks.iter().enumerate() {
        let x = MARGIN + k as f64 * (CELL + GAP);
        let y = MARGIN + TEXT;
        if m.is_skipped() {
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{CELL:.2}" height="{CELL:.2}" fill="none" stroke="#555555" stroke-dasharray="4 3"/>"##
            );
        } else {
            let w = CELL * m.tokens_kept() as f64 / cfg.num_tokens as f64;
            let h = CELL * m.heads_kept() as f64 / cfg.num_heads as f64;
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{CELL:.2}" height="{CELL:.2}" fill="none" stroke="#bbbbbb"/>"##
            );
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="#2b6cb0"/>"##,
                y + CELL - h
            );
        }
        let label = if m.is_skipped() {
            format!("b{k} skip")
        } else {
            format!("b{k} h{} n{}", m.heads_kept(), m.tokens_kept())
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="9" text-anchor="middle">{label}</text>"#,
            x + CELL / 2.0,
            y + CELL + 12.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn export_policy_grid(trace: &SampleTrace, cfg: &ValidConfig, path: &Path) -> Result<()> {
    let svg = policy_grid_svg(trace, cfg)?;
    fs::write(path, svg).map_err(|e| MiaError::io(path, e))
}

/// One cell of the ablation grid. Failed cells carry the error and no
/// metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dims: String,
    pub head: bool,
    pub depth: bool,
    pub token: bool,
    pub accuracy: Option<f64>,
    pub exec_ratio: Option<f64>,
    /// Whether every disabled dimension stayed on in every evaluated trace.
    pub disabled_forced_on: Option<bool>,
    pub error: Option<String>,
}

/// Whether the masks of every dimension outside `dims` are all ones.
pub fn disabled_forced_on(traces: &[SampleTrace], dims: DimensionSet) -> bool {
    traces.iter().flat_map(|t| &t.blocks).all(|m| {
        (dims.depth || m.d_block) && (dims.head || m.d_heads.iter().all(|&b| b)) && (dims.token || m.d_tokens.iter().all(|&b| b))
    })
}

fn cell_dir(out: &Path, dims: DimensionSet) -> PathBuf {
    out.join(format!("dims_{dims}"))
}

fn run_cell(stage1: &TrainState, data: &Splits, dims: DimensionSet, dir: Option<&Path>, rl: bool) -> Result<(TrainState, Vec<SampleTrace>)> {
    let ckpt = dir.map(|d| d.join("checkpoint"));
    let wanted = if rl { Stage::RlFinetune } else { Stage::Cotrain };
    let cached = ckpt
        .as_deref()
        .filter(|c| c.join("manifest.json").exists())
        .and_then(|c| TrainState::load(c).ok())
        .filter(|s| s.stage == wanted && s.stage_complete && s.dims == dims && s.run == stage1.run);
    let state = match cached {
        Some(s) => s,
        None => {
            let mut state = stage1.clone();
            state.dims = dims;
            let mut log = RunLog::new(dir)?;
            cotrain(&mut state, data, &mut log)?;
            if rl {
                finetune_rl(&mut state, data, &mut log)?;
            }
            if let Some(c) = &ckpt {
                state.save(c)?;
            }
            state
        }
    };
    let cfg = state.run.model.validate()?;
    let eval = evaluate(&cfg, &state.params, &data.val, Policy::eval(&state.params, dims))?;
    if let Some(d) = dir {
        write_traces(&d.join("trace.csv"), &eval.traces)?;
    }
    Ok((state, eval.traces))
}

/// Trains and evaluates one model per dimension subset from a shared
/// controller-pretrained state. Checkpoints found under `out` are reused.
/// A failing cell is reported in its row and the rest still run.
pub fn ablation_harness(stage1: &TrainState, data: &Splits, subsets: &[DimensionSet], out: Option<&Path>, rl: bool) -> Result<Vec<AblationRow>> {
    if stage1.stage != Stage::ControllerPretrain || !stage1.stage_complete {
        return Err(MiaError::Stage("the ablation harness starts from a completed controller pretraining".into()));
    }
    let mut rows = Vec::with_capacity(subsets.len());
    for &dims in subsets {
        let dir = out.map(|o| cell_dir(o, dims));
        let mut row = AblationRow {
            dims: dims.to_string(),
            head: dims.head,
            depth: dims.depth,
            token: dims.token,
            accuracy: None,
            exec_ratio: None,
            disabled_forced_on: None,
            error: None,
        };
        match run_cell(stage1, data, dims, dir.as_deref(), rl) {
            Ok((state, traces)) => {
                let cfg = state.run.model.validate()?;
                let n = traces.len() as f64;
                let correct = traces.iter().filter(|t| t.correct() == Some(true)).count();
                let flops = crate::cost::model_flops(&cfg, traces.iter().map(|t| (t.sample_id, t.blocks.as_slice())))?;
                row.accuracy = Some(correct as f64 / n);
                row.exec_ratio = Some(flops.mean_ratio);
                row.disabled_forced_on = Some(disabled_forced_on(&traces, dims));
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    if let Some(o) = out {
        write_rows(&o.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}
