//! SVG charts and text tables for audit results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::calibration::AttentionProfile;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_by_position, read_records_csv, GroupKey, PositionAggregate, SimilarityKind};
use crate::pipeline::{read_ols_csv, OlsRow, OLS_FILE, RECORDS_FILE};
use crate::scalar::Scalar;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f"];

#[derive(Debug, Clone, PartialEq)]
pub struct ChartStyle {
    pub width: f64,
    pub height: f64,
    pub margin: f64,
    pub title: String,
    pub y_label: String,
}

impl Default for ChartStyle {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 400.0,
            margin: 56.0,
            title: String::new(),
            y_label: "mean similarity".into(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, style: &ChartStyle) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = style.width,
        h = style.height
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#, style.width, style.height);
    if !style.title.is_empty() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            style.width / 2.0,
            escape(&style.title)
        );
    }
}

/// Pads a `[lo, hi]` data range so flat series still get a visible band.
fn y_range(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let pad = if span > 0.0 { span * 0.1 } else { lo.abs().max(1.0) * 0.05 };
    (lo - pad, hi + pad)
}

/// Line chart of per-position means, one polyline per group.
///
/// Each group needs at least two positions.
pub fn render_profile_svg(aggregates: &[PositionAggregate], style: &ChartStyle) -> Result<String> {
    if aggregates.is_empty() {
        return Err(Error::EmptyInput("no aggregates to plot".into()));
    }
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for a in aggregates {
        series.entry(a.group.join(" / ")).or_default().push((a.position, a.mean));
    }
    for (name, points) in &mut series {
        points.sort_by_key(|p| p.0);
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!("series `{name}` has a single position")));
        }
    }
    let max_pos = series.values().flat_map(|s| s.iter().map(|p| p.0)).max().unwrap_or(1);
    let min_pos = series.values().flat_map(|s| s.iter().map(|p| p.0)).min().unwrap_or(1);
    let lo = aggregates.iter().map(|a| a.mean).fold(f64::INFINITY, f64::min);
    let hi = aggregates.iter().map(|a| a.mean).fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = y_range(lo, hi);

    let m = style.margin;
    let plot_w = style.width - 2.0 * m - 140.0;
    let plot_h = style.height - 2.0 * m;
    let x_of = |p: usize| {
        if max_pos == min_pos {
            m + plot_w / 2.0
        } else {
            m + plot_w * (p - min_pos) as f64 / (max_pos - min_pos) as f64
        }
    };
    let y_of = |v: f64| m + plot_h * (1.0 - (v - y0) / (y1 - y0));

    let mut out = String::new();
    header(&mut out, style);
    let _ = writeln!(
        out,
        r#"<g stroke="black" stroke-width="1"><line x1="{m}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b:.2}"/></g>"#,
        b = m + plot_h,
        r = m + plot_w
    );
    for p in min_pos..=max_pos {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{p}</text>"#,
            x_of(p),
            m + plot_h + 16.0
        );
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
            m - 6.0,
            y_of(v) + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">position</text>"#,
        m + plot_w / 2.0,
        style.height - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        m + plot_h / 2.0,
        m + plot_h / 2.0,
        escape(&style.y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points.iter().map(|&(p, v)| format!("{:.2},{:.2}", x_of(p), y_of(v))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = m + 14.0 * i as f64;
        let lx = m + plot_w + 16.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10">{}</text>"#,
            lx + 14.0,
            lx + 18.0,
            ly + 3.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Bar chart of an attention profile. `<s>` and `</s>` are drawn in grey
/// on either side of the content baskets, separated by a gap.
pub fn render_attention_svg<T: Scalar>(profile: &AttentionProfile<T>, style: &ChartStyle) -> Result<String> {
    if profile.basket_masses.is_empty() {
        return Err(Error::EmptyInput("attention profile has no content baskets".into()));
    }
    let mut bars: Vec<(String, f64, bool)> = vec![("<s>".into(), profile.start_mass.as_f64(), true)];
    bars.extend(
        profile
            .basket_ranges
            .iter()
            .zip(&profile.basket_masses)
            .map(|(r, m)| (format!("{}-{}", r.start, r.end - 1), m.as_f64(), false)),
    );
    bars.push(("</s>".into(), profile.end_mass.as_f64(), true));
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-12) * 1.1;

    let m = style.margin;
    let plot_w = style.width - 2.0 * m;
    let plot_h = style.height - 2.0 * m;
    // Two extra slots hold the gaps around the content baskets.
    let slot = plot_w / (bars.len() + 2) as f64;
    let mut out = String::new();
    header(&mut out, style);
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}" stroke="black" stroke-width="1"/>"#,
        b = m + plot_h,
        r = m + plot_w
    );
    let last = bars.len() - 1;
    for (i, (label, mass, special)) in bars.iter().enumerate() {
        let gap = if i == 0 { 0 } else if i == last { 2 } else { 1 };
        let x = m + slot * (i + gap) as f64 + slot * 0.1;
        let h = plot_h * mass / top;
        let fill = if *special { "#999999" } else { PALETTE[0] };
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{fill}"><title>{} {mass:.4}</title></rect>"#,
            m + plot_h - h,
            slot * 0.8,
            escape(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="9" text-anchor="middle">{}</text>"#,
            x + slot * 0.4,
            m + plot_h + 12.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
        style.width / 2.0,
        style.height - 10.0,
        escape(&profile.describe_layers())
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Significance markers: one `*` per threshold the p-value falls below.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceLevels(pub Vec<f64>);

impl Default for SignificanceLevels {
    fn default() -> Self {
        Self(vec![0.05, 0.01, 0.001])
    }
}

impl SignificanceLevels {
    pub fn marker(&self, p: f64) -> String {
        "*".repeat(self.0.iter().filter(|&&a| p < a).count())
    }
}

/// Fixed-width table of OLS rows grouped by instance, kind and calibration.
pub fn format_ols_table(rows: &[OlsRow], levels: &SignificanceLevels) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no OLS rows".into()));
    }
    let mut groups: BTreeMap<(&str, SimilarityKind, &str), Vec<&OlsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.instance_id, r.kind, &r.calibration_id)).or_default().push(r);
    }
    let mut out = String::new();
    for ((instance, kind, cal), mut group) in groups {
        group.sort_by_key(|r| r.p);
        let first = group[0];
        let _ = writeln!(out, "{instance}  {kind}  {cal}  (G={}, N={})", first.g, first.n_obs);
        let _ = writeln!(out, "{:<6}{:>12}{:>12}{:>10}{:>10}", "term", "beta", "se", "t", "p");
        for r in group {
            let term = if r.p == 1 { "const".to_string() } else { format!("p{}", r.p) };
            let _ = writeln!(
                out,
                "{term:<6}{:>12.6}{:>12.6}{:>10.3}{:>10.4} {}",
                r.beta,
                r.se,
                r.t,
                r.p_value,
                levels.marker(r.p_value)
            );
        }
        out.push('\n');
    }
    let legend: Vec<String> = levels
        .0
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{} p<{a}", "*".repeat(i + 1)))
        .collect();
    let _ = writeln!(out, "{}", legend.join("  "));
    Ok(out)
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Renders every chart and table for a finished run directory.
/// Returns the files written.
pub fn write_run_report(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_records_csv(File::open(run_dir.join(RECORDS_FILE))?)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let mut by_instance: BTreeMap<(String, SimilarityKind), Vec<_>> = BTreeMap::new();
    for r in records {
        by_instance.entry((r.instance_id(), r.kind)).or_default().push(r);
    }
    for ((instance, kind), recs) in &by_instance {
        let aggregates = aggregate_by_position(recs, &[GroupKey::Calibration])?;
        let style = ChartStyle {
            title: format!("{instance} {kind}"),
            y_label: format!("mean {kind} similarity"),
            ..ChartStyle::default()
        };
        match render_profile_svg(&aggregates, &style) {
            Ok(svg) => {
                let path = out_dir.join(format!("profile-{}-{}.svg", slug(instance), kind));
                fs::write(&path, svg)?;
                written.push(path);
            }
            Err(e) => log::warn!("skipping {instance} {kind}: {e}"),
        }
    }

    let ols_path = run_dir.join(OLS_FILE);
    if ols_path.exists() {
        let rows = read_ols_csv(File::open(ols_path)?)?;
        if !rows.is_empty() {
            let path = out_dir.join("ols.txt");
            fs::write(&path, format_ols_table(&rows, &SignificanceLevels::default())?)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agg(group: &str, position: usize, mean: f64) -> PositionAggregate {
        PositionAggregate {
            group: vec![group.into()],
            position,
            mean,
            std_dev: 0.0,
            count: 1,
        }
    }

    #[test]
    fn profile_structure_and_determinism() {
        let data: Vec<_> = ["none", "B2-L1..1-uniform"]
            .iter()
            .flat_map(|g| (1..=3).map(move |p| agg(g, p, 0.9 - 0.1 * p as f64)))
            .collect();
        let a = render_profile_svg(&data, &ChartStyle::default()).unwrap();
        let b = render_profile_svg(&data, &ChartStyle::default()).unwrap();
        assert_eq!(a, b);
        let polylines: Vec<&str> = a.lines().filter(|l| l.contains("<polyline")).collect();
        assert_eq!(polylines.len(), 2);
        for l in polylines {
            let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            assert_eq!(pts.split(' ').count(), 3);
        }
    }

    #[test]
    fn profile_guards() {
        assert!(render_profile_svg(&[], &ChartStyle::default()).is_err());
        assert!(render_profile_svg(&[agg("x", 1, 0.5)], &ChartStyle::default()).is_err());
    }

    fn profile() -> AttentionProfile<f64> {
        AttentionProfile {
            start_mass: 0.4,
            end_mass: 0.1,
            basket_ranges: vec![1..3],
            basket_masses: vec![0.5],
            layers: vec![1],
            head_count: 1,
        }
    }

    #[test]
    fn attention_structure_and_determinism() {
        let a = render_attention_svg(&profile(), &ChartStyle::default()).unwrap();
        assert_eq!(a, render_attention_svg(&profile(), &ChartStyle::default()).unwrap());
        assert_eq!(a.matches("<rect x=").count(), 1 + 3);
        assert!(a.contains("&lt;s&gt;") && a.contains("&lt;/s&gt;"));
        let mut empty = profile();
        empty.basket_masses.clear();
        empty.basket_ranges.clear();
        assert!(render_attention_svg(&empty, &ChartStyle::default()).is_err());
    }

    fn row(p: usize, p_value: f64) -> OlsRow {
        OlsRow {
            instance_id: "n3-mono-en".into(),
            kind: SimilarityKind::Representation,
            p,
            beta: -0.35,
            se: 0.02,
            t: -17.5,
            p_value,
            g: 4,
            n_obs: 72,
            calibration_id: "none".into(),
        }
    }

    #[test]
    fn table_markers() {
        assert!(format_ols_table(&[], &SignificanceLevels::default()).is_err());
        let levels = SignificanceLevels::default();
        assert_eq!(levels.marker(0.2), "");
        assert_eq!(levels.marker(0.03), "*");
        assert_eq!(levels.marker(0.005), "**");
        assert_eq!(levels.marker(0.0001), "***");
        let t = format_ols_table(&[row(1, 0.0), row(2, 0.03)], &levels).unwrap();
        assert!(t.contains("n3-mono-en  representation  none  (G=4, N=72)"));
        let p2 = t.lines().find(|l| l.starts_with("p2")).unwrap();
        assert!(p2.ends_with(" *"), "{p2}");
        let custom = SignificanceLevels(vec![0.1]);
        assert_eq!(custom.marker(0.05), "*");
    }
}
