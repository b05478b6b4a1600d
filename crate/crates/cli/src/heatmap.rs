use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use stackwfa::error::{Error, Result};
use stackwfa::tasks::{Dataset, Task};
use stackwfa::training::{action_heatmap, marked_reversal_labels, Checkpoint};

use crate::commands::{require_nonempty, Ctx};
use crate::manifest::{with_suffix, write_file, RunManifest};

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// One checkpoint gives a position×string matrix; several give
    /// position×checkpoint rows averaged over strings
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Marked-reversal dataset to read strings from
    #[arg(long)]
    data: PathBuf,
    /// Strings to use
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Only use strings of this length [default: length of the first string]
    #[arg(long)]
    length: Option<usize>,
    /// Pixels per matrix cell in the image
    #[arg(long, default_value_t = 8)]
    scale: usize,
    /// Output prefix; writes <out>.csv and <out>.pgm [default: <data-dir>/heatmap-seed<seed>]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// Binary PGM where darker pixels mean more weight on the correct action.
pub fn render_pgm(rows: &[Vec<f64>], scale: usize) -> Vec<u8> {
    let width = rows.first().map_or(0, Vec::len) * scale;
    let height = rows.len() * scale;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in rows {
        let line: Vec<u8> = row
            .iter()
            .flat_map(|&v| std::iter::repeat_n((255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8, scale))
            .collect();
        for _ in 0..scale {
            out.extend_from_slice(&line);
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header `row,1,…,n` then one line per labelled row.
pub fn render_csv(labels: &[String], rows: &[Vec<f64>]) -> String {
    let width = rows.first().map_or(0, Vec::len);
    let mut s = String::from("row");
    for k in 1..=width {
        write!(s, ",{k}").unwrap();
    }
    s.push('\n');
    for (label, row) in labels.iter().zip(rows) {
        s.push_str(&csv_field(label));
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn label_of(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn heatmap(ctx: &Ctx, args: HeatmapArgs) -> Result<()> {
    require_nonempty(&args.checkpoints, "--checkpoint")?;
    if args.scale == 0 || args.count == 0 {
        return Err(Error::usage("--scale and --count must be positive"));
    }
    let ds = Dataset::read(&args.data)?;
    if ds.provenance.task != Task::MarkedReversal.name() {
        return Err(Error::usage(format!(
            "correct-action labels are defined for marked-reversal data, not {}",
            ds.provenance.task
        )));
    }
    let marker = ds
        .vocab
        .iter()
        .position(|t| t == "#")
        .ok_or_else(|| Error::data("marked-reversal vocabulary lacks the `#` marker"))?;
    let len = match args.length {
        Some(l) => l,
        None => ds
            .strings
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::data("dataset is empty"))?,
    };
    if len < 2 {
        return Err(Error::usage(
            "strings need at least two symbols to show any stack action",
        ));
    }
    let strings: Vec<Vec<usize>> = ds
        .strings
        .iter()
        .filter(|w| w.len() == len)
        .take(args.count)
        .cloned()
        .collect();
    if strings.is_empty() {
        return Err(Error::data(format!(
            "no strings of length {len} in {}",
            args.data.display()
        )));
    }
    let labels_fn = move |w: &[usize]| marked_reversal_labels(w, marker);
    let mut m = RunManifest::new("heatmap");
    m.config(&json!({
        "checkpoints": args.checkpoints,
        "data": args.data,
        "count": args.count,
        "length": len,
        "scale": args.scale,
    }));
    m.seed("seed", ctx.seed);
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let start = std::time::Instant::now();
    for path in &args.checkpoints {
        let model = Checkpoint::load(path)?.model()?;
        if model.vocab[..model.eos] != ds.vocab[..] {
            return Err(Error::usage(format!(
                "{} was trained on a different vocabulary than {}",
                path.display(),
                args.data.display()
            )));
        }
        let matrix = action_heatmap(&model, &strings, &labels_fn)?;
        if args.checkpoints.len() == 1 {
            for (i, (w, row)) in strings.iter().zip(matrix).enumerate() {
                labels.push(format!("{i}: {}", ds.render(w)));
                rows.push(row);
            }
        } else {
            let n = matrix.len() as f64;
            let mean = (0..len - 1)
                .map(|k| matrix.iter().map(|r| r[k]).sum::<f64>() / n)
                .collect();
            labels.push(label_of(path));
            rows.push(mean);
        }
    }
    m.timings.insert("heatmap".into(), start.elapsed().as_secs_f64());
    let prefix = args
        .out
        .unwrap_or_else(|| ctx.root.join(format!("heatmap-seed{}", ctx.seed)));
    let csv = with_suffix(&prefix, ".csv");
    let pgm = with_suffix(&prefix, ".pgm");
    write_file(&csv, render_csv(&labels, &rows).as_bytes())?;
    write_file(&pgm, &render_pgm(&rows, args.scale))?;
    m.artifact(&csv);
    m.artifact(&pgm);
    println!(
        "{} rows × {} positions -> {}, {}",
        rows.len(),
        len - 1,
        csv.display(),
        pgm.display()
    );
    ctx.finish(&m, with_suffix(&prefix, ".manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_shading() {
        let img = render_pgm(&[vec![0.0, 1.0], vec![0.5, 0.25]], 2);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!(&px[..4], &[255, 255, 0, 0]);
        assert_eq!(&px[8..12], &[128, 128, 191, 191]);
    }

    #[test]
    fn csv_quotes_labels() {
        let s = render_csv(&["a,b".into()], &[vec![0.5]]);
        assert_eq!(s, "row,1\n\"a,b\",0.5\n");
    }
}
