//! Aggregation of evaluation curves into tables and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use ppt_core::eval::{read_csv, summarize, CurveTable, Method, SummaryRow};

/// Reads every CSV, refusing inputs produced under different configs.
pub fn load_tables(paths: &[PathBuf]) -> Result<(CurveTable, String)> {
    let mut table = CurveTable::default();
    let mut hash: Option<String> = None;
    for p in paths {
        if !p.exists() {
            bail!("missing prerequisite: {} not found; run `ppt eval` first", p.display());
        }
        let (t, meta) = read_csv(p).with_context(|| format!("reading {}", p.display()))?;
        let h = meta
            .get("config_hash")
            .cloned()
            .with_context(|| format!("{} carries no config_hash line", p.display()))?;
        match &hash {
            Some(prev) if *prev != h => bail!("config hash mismatch: {} has {h}, earlier input has {prev}", p.display()),
            _ => hash = Some(h),
        }
        table.records.extend(t.records);
    }
    if table.records.is_empty() {
        bail!("no evaluation rows to report in {}", paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    Ok((table, hash.unwrap_or_default()))
}

pub fn run(paths: &[PathBuf], out_dir: &Path) -> Result<()> {
    let (table, hash) = load_tables(paths)?;
    let rows = summarize(&table)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut csv = format!("# config_hash={hash}\nmethod,user,turn,seeds,reward_mean,reward_stderr,accuracy_mean,accuracy_stderr\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{:?},{:?},{:?},{:?}",
            r.method.as_str(),
            r.user,
            r.turn,
            r.seeds,
            r.reward_mean,
            r.reward_stderr,
            r.accuracy_mean,
            r.accuracy_stderr
        )?;
    }
    write(&out_dir.join("summary.csv"), &csv)?;
    let md = markdown(&rows, &hash);
    write(&out_dir.join("summary.md"), &md)?;
    write(&out_dir.join("reward.svg"), &svg(&rows, "expected reward", |r| (r.reward_mean, r.reward_stderr)))?;
    write(&out_dir.join("accuracy.svg"), &svg(&rows, "accuracy", |r| (r.accuracy_mean, r.accuracy_stderr)))?;
    print!("{md}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn users(rows: &[SummaryRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.user) {
            out.push(r.user.clone());
        }
    }
    out
}

fn markdown(rows: &[SummaryRow], hash: &str) -> String {
    let mut s = format!("config_hash: {hash}\n\n| user | method | turn 1 reward | last reward | last accuracy | seeds |\n|---|---|---|---|---|---|\n");
    for user in users(rows) {
        for method in [Method::Ppt, Method::Ps] {
            let mine: Vec<&SummaryRow> = rows.iter().filter(|r| r.user == user && r.method == method).collect();
            let (Some(first), Some(last)) = (mine.first(), mine.last()) else { continue };
            let _ = writeln!(
                s,
                "| {user} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} | {} |",
                method.as_str(),
                first.reward_mean,
                first.reward_stderr,
                last.reward_mean,
                last.reward_stderr,
                last.accuracy_mean,
                last.accuracy_stderr,
                last.seeds
            );
        }
    }
    s
}

/// One panel per user; mean curve with a ±1 stderr band per method.
fn svg(rows: &[SummaryRow], metric: &str, value: impl Fn(&SummaryRow) -> (f64, f64)) -> String {
    let users = users(rows);
    let (pw, ph, pad) = (300.0, 220.0, 40.0);
    let width = pw * users.len() as f64;
    let max_turn = rows.iter().map(|r| r.turn).max().unwrap_or(1).max(2) as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        let (m, e) = value(r);
        lo = lo.min(m - e);
        hi = hi.max(m + e);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
        ph + 20.0
    );
    for (i, user) in users.iter().enumerate() {
        let x0 = i as f64 * pw;
        let px = |t: f64| x0 + pad + (t - 1.0) / (max_turn - 1.0) * (pw - 1.5 * pad);
        let py = |v: f64| 10.0 + (hi - v) / (hi - lo) * (ph - pad);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{user}: {metric}</text>"#, x0 + pad, ph + 12.0);
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="10" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            x0 + pad,
            pw - 1.5 * pad,
            ph - pad
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{hi:.2}</text><text x="{}" y="{}">{lo:.2}</text>"#, x0 + 2.0, 20.0, x0 + 2.0, ph - pad + 10.0);
        for (method, colour) in [(Method::Ppt, "#1f77b4"), (Method::Ps, "#d62728")] {
            let pts: Vec<(f64, f64, f64)> = rows
                .iter()
                .filter(|r| &r.user == user && r.method == method)
                .map(|r| {
                    let (m, e) = value(r);
                    (r.turn as f64, m, e)
                })
                .collect();
            if pts.is_empty() {
                continue;
            }
            let upper: Vec<String> = pts.iter().map(|(t, m, e)| format!("{:.1},{:.1}", px(*t), py(m + e))).collect();
            let lower: Vec<String> = pts.iter().rev().map(|(t, m, e)| format!("{:.1},{:.1}", px(*t), py(m - e))).collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{} {}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = pts.iter().map(|(t, m, _)| format!("{:.1},{:.1}", px(*t), py(*m))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, line.join(" "));
            let (lt, lm, _) = pts[pts.len() - 1];
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{colour}">{}</text>"#, px(lt) + 3.0, py(lm), method.as_str());
        }
    }
    s.push_str("</svg>\n");
    s
}
