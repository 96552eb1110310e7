//! Output-side helpers: run manifests, byte-stable JSON, JSONL, and a
//! small dependency-free SVG plot writer for PR curves.

use autodet_core::eval::PrPoint;
use autodet_core::{Error, Result};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Written next to every command's outputs so a run can be replayed.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    /// SHA-256 over the resolved configuration JSON.
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub cli: &'static str,
    pub core: &'static str,
}

pub fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
    seed: u64,
) -> Result<()> {
    let cfg_json = serde_json::to_string(config)?;
    let mut h = Sha256::new();
    h.update(cfg_json.as_bytes());
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: format!("{:x}", h.finalize()),
        seed,
        versions: Versions {
            cli: env!("CARGO_PKG_VERSION"),
            core: autodet_core::VERSION,
        },
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Pretty JSON with a trailing newline; serialization order follows the
/// struct definition, so output bytes are stable run-to-run.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let s = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Precision-recall curve as a standalone SVG image.
pub fn pr_curve_svg(points: &[PrPoint], title: &str) -> String {
    let (w, h) = (480.0, 360.0);
    let (ml, mr, mt, mb) = (50.0, 15.0, 30.0, 40.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let x = |r: f64| ml + r * pw;
    let y = |p: f64| mt + (1.0 - p) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-family="monospace" font-size="13">{title}</text>"#,
        w / 2.0
    );
    // axes and gridlines at 0.25 steps
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            x(t),
            y(0.0),
            x(t),
            y(1.0)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            x(0.0),
            y(t),
            x(1.0),
            y(t)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="monospace" font-size="10">{t:.2}</text>"#,
            x(t),
            h - mb + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="monospace" font-size="10">{t:.2}</text>"#,
            ml - 6.0,
            y(t) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="monospace" font-size="11">recall</text>"#,
        ml + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{:.1}" text-anchor="middle" font-family="monospace" font-size="11" transform="rotate(-90 12 {:.1})">precision</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    if !points.is_empty() {
        let mut path = format!("M {:.2} {:.2}", x(0.0), y(points[0].precision));
        for p in points {
            let _ = write!(path, " L {:.2} {:.2}", x(p.recall), y(p.precision));
        }
        let _ = writeln!(
            s,
            r##"<path d="{path}" fill="none" stroke="#c22" stroke-width="1.5"/>"##
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Render rows of (label, columns) into a fixed-width text table.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(ncol) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, head) in header.iter().enumerate() {
        if i > 0 {
            out.push_str("  ");
        }
        let _ = write!(out, "{:<w$}", head, w = widths[i]);
    }
    out.push('\n');
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(ncol) {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                let _ = write!(out, "{:<w$}", cell, w = widths[i]);
            } else {
                let _ = write!(out, "{:>w$}", cell, w = widths[i]);
            }
        }
        out.push('\n');
    }
    out
}
