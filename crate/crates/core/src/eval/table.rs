use std::fmt::Write;

use super::{EvalReport, Setting};

/// `correct / n` as a percentage with one decimal, rounded half up from the
/// exact counts.
pub fn format_percent(correct: usize, n: usize) -> String {
    if n == 0 {
        return "-".into();
    }
    let permille = (2 * correct as u128 * 1000 + n as u128) / (2 * n as u128);
    format!("{}.{}", permille / 10, permille % 10)
}

fn width(s: &str) -> usize {
    s.chars().count()
}

fn pad(s: &str, w: usize) -> String {
    format!("{s}{}", " ".repeat(w.saturating_sub(width(s))))
}

/// Plain-text results table.
///
/// Rows are systems, grouped by `group`; columns are setting by encoder.
/// A `†` follows significant results and a `*` marks the best score within
/// a group and column when that column has at least two entries there.
/// Missing combinations show `-`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let settings: Vec<Setting> = Setting::ALL
        .into_iter()
        .filter(|s| reports.iter().any(|r| r.setting == *s))
        .collect();
    let mut encoders: Vec<&str> = Vec::new();
    let mut rows: Vec<(&str, &str)> = Vec::new();
    for r in reports {
        if !encoders.contains(&r.encoder_id.as_str()) {
            encoders.push(&r.encoder_id);
        }
        if !rows.contains(&(r.group.as_str(), r.system.as_str())) {
            rows.push((&r.group, &r.system));
        }
    }
    let columns: Vec<(Setting, &str)> = settings
        .iter()
        .flat_map(|&s| encoders.iter().map(move |&e| (s, e)))
        .collect();
    let find = |g: &str, sys: &str, (s, e): (Setting, &str)| {
        reports
            .iter()
            .find(|r| r.group == g && r.system == sys && r.setting == s && r.encoder_id == e)
    };
    let beats = |a: &EvalReport, b: &EvalReport| {
        (a.correct as u128) * (b.n_samples as u128) > (b.correct as u128) * (a.n_samples as u128)
    };

    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for (i, &(g, sys)) in rows.iter().enumerate() {
        let first_in_group = i == 0 || rows[i - 1].0 != g;
        labels.push(if first_in_group || g.is_empty() || sys == g {
            sys.to_string()
        } else {
            format!("  {sys}")
        });
        let mut line = Vec::new();
        for &col in &columns {
            let Some(r) = find(g, sys, col) else {
                line.push("-".to_string());
                continue;
            };
            let mut cell = format_percent(r.correct, r.n_samples);
            if r.significance.as_ref().is_some_and(|s| s.significant) {
                cell.push('†');
            }
            let peers: Vec<&EvalReport> = rows
                .iter()
                .filter(|(pg, _)| *pg == g)
                .filter_map(|&(pg, ps)| find(pg, ps, col))
                .collect();
            if peers.len() >= 2 && !peers.iter().any(|p| beats(p, r)) {
                cell.push('*');
            }
            line.push(cell);
        }
        cells.push(line);
    }

    let label_head = "Model";
    let mut w0 = labels.iter().map(|l| width(l)).max().unwrap_or(0).max(width(label_head));
    let mut widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(j, (_, e))| cells.iter().map(|row| width(&row[j])).max().unwrap_or(0).max(width(e)))
        .collect();
    let k = encoders.len();
    for (gi, s) in settings.iter().enumerate() {
        let span: usize = widths[gi * k..(gi + 1) * k].iter().sum::<usize>() + 3 * (k - 1);
        let need = width(s.title());
        if need > span {
            widths[(gi + 1) * k - 1] += need - span;
        }
    }
    w0 = w0.max(1);

    let mut out = String::new();
    let mut line = pad(label_head, w0);
    for (gi, s) in settings.iter().enumerate() {
        let span: usize = widths[gi * k..(gi + 1) * k].iter().sum::<usize>() + 3 * (k - 1);
        line.push_str(" | ");
        line.push_str(&pad(s.title(), span));
    }
    writeln!(out, "{}", line.trim_end()).unwrap();
    let mut line = pad("", w0);
    for (j, (_, e)) in columns.iter().enumerate() {
        line.push_str(" | ");
        line.push_str(&pad(e, widths[j]));
    }
    writeln!(out, "{}", line.trim_end()).unwrap();
    let mut rule = "-".repeat(w0);
    for w in &widths {
        rule.push_str("-+-");
        rule.push_str(&"-".repeat(*w));
    }
    writeln!(out, "{rule}").unwrap();
    for (i, row) in cells.iter().enumerate() {
        if i > 0 && rows[i - 1].0 != rows[i].0 {
            writeln!(out, "{rule}").unwrap();
        }
        let mut line = pad(&labels[i], w0);
        for (j, c) in row.iter().enumerate() {
            line.push_str(" | ");
            line.push_str(&pad(c, widths[j]));
        }
        writeln!(out, "{}", line.trim_end()).unwrap();
    }
    out
}

/// Bucket summary lines for one report; empty when buckets were not
/// computed.
pub fn render_buckets(report: &EvalReport) -> String {
    let Some(buckets) = &report.buckets else {
        return String::new();
    };
    let mut out = format!(
        "{} / {} / {}\n",
        if report.system.is_empty() { "-" } else { &report.system },
        report.setting,
        report.encoder_id
    );
    for (i, b) in buckets.iter().enumerate() {
        let members: Vec<String> = b.members.iter().map(ToString::to_string).collect();
        writeln!(
            out,
            "  bucket {}: n={:<2} mean={:.1}%  labels [{}]",
            i + 1,
            b.members.len(),
            b.mean_accuracy * 100.0,
            members.join(", ")
        )
        .unwrap();
    }
    out
}
