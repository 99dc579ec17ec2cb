//! Positioning error statistics and CDF plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Position;
use crate::error::{Error, Result};
use crate::positioning::Estimate;

pub const PERCENTILES: [u32; 4] = [50, 75, 90, 95];

/// Euclidean distances between estimates and the true positions, by index.
pub fn compute_errors(estimates: &[Estimate], truth: &[Position]) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} estimates for {} truth positions",
            estimates.len(),
            truth.len()
        )));
    }
    Ok(estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| e.position().distance(t))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub errors: Vec<f64>,
    /// `None` when there are no errors to summarize.
    pub mean_error: Option<f64>,
    /// Keyed by the percentile level as a string ("50", "75", ...).
    pub percentiles: BTreeMap<String, f64>,
    /// Distinct error values with the fraction of errors at or below each.
    pub cdf: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn percentile(&self, level: u32) -> Option<f64> {
        self.percentiles.get(&level.to_string()).copied()
    }

    /// Empirical CDF evaluated at `e`.
    pub fn fraction_at(&self, e: f64) -> f64 {
        self.cdf
            .iter()
            .take_while(|(x, _)| *x <= e)
            .last()
            .map_or(0.0, |(_, f)| *f)
    }
}

pub fn summarize(errors: &[f64], label: &str) -> EvalReport {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n as f64;
        match cdf.last_mut() {
            Some(last) if last.0 == e => last.1 = frac,
            _ => cdf.push((e, frac)),
        }
    }
    let mut percentiles = BTreeMap::new();
    if n > 0 {
        for p in PERCENTILES {
            // smallest k with k/n >= p/100, in integers to avoid rounding
            let k = (p as usize * n).div_ceil(100).max(1);
            percentiles.insert(p.to_string(), sorted[k - 1]);
        }
    }
    EvalReport {
        label: label.to_string(),
        errors: errors.to_vec(),
        mean_error: (n > 0).then(|| sorted.iter().sum::<f64>() / n as f64),
        percentiles,
        cdf,
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders the CDFs of `reports` as a standalone SVG document.
pub fn render_cdf_svg(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Validation("no reports to plot".into()));
    }
    let x_max = reports
        .iter()
        .flat_map(|r| r.cdf.last().map(|c| c.0))
        .fold(0.0, f64::max);
    let x_max = if x_max > 0.0 { x_max * 1.05 } else { 1.0 };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + pw * x / x_max;
    let sy = |y: f64| TOP + ph * (1.0 - y);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let (x, y) = (sx(t * x_max), sy(t));
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{:.2}</text>"#,
            TOP + ph + 16.0,
            t * x_max
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t:.1}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">error</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">cumulative fraction</text>"#,
        TOP + ph / 2.0
    );

    for (k, r) in reports.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts = format!("{:.2},{:.2}", sx(0.0), sy(0.0));
        let mut prev = 0.0;
        for &(e, f) in &r.cdf {
            let _ = write!(pts, " {:.2},{:.2} {:.2},{:.2}", sx(e), sy(prev), sx(e), sy(f));
            prev = f;
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        );
        if let Some(mean) = r.mean_error {
            let y = sy(r.fraction_at(mean));
            let _ = writeln!(
                s,
                r#"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-dasharray="2 3"/>"#,
                LEFT + pw
            );
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw - 150.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            lx + 20.0
        );
        let mean = r.mean_error.map_or("n/a".to_string(), |m| format!("{m:.2}"));
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{:.2}" y="{:.2}">{} (mean {mean})</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&r.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_cdf_svg(reports: &[EvalReport], path: &Path) -> Result<()> {
    let svg = render_cdf_svg(reports)?;
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn est(x: f64, y: f64) -> Estimate {
        Estimate {
            row: 0,
            col: 0,
            x,
            y,
            posterior_mass: 1.0,
        }
    }

    #[test]
    fn errors_are_distances() {
        let e = compute_errors(
            &[est(0.0, 0.0), est(1.0, 1.0)],
            &[Position::new(3.0, 4.0), Position::new(1.0, 1.0)],
        )
        .unwrap();
        assert_eq!(e, vec![5.0, 0.0]);
        assert!(compute_errors(&[], &[]).unwrap().is_empty());
        assert!(matches!(
            compute_errors(&[est(0.0, 0.0)], &[]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn summary_examples() {
        let r = summarize(&[0.0, 1.0, 2.0, 3.0], "a");
        assert_eq!(r.mean_error, Some(1.5));
        assert_eq!(r.fraction_at(2.0), 0.75);
        assert_eq!(r.fraction_at(2.5), 0.75);
        assert_eq!(r.fraction_at(-1.0), 0.0);
        assert_eq!(r.percentile(50), Some(1.0));
        assert_eq!(r.percentile(75), Some(2.0));
        assert_eq!(r.percentile(95), Some(3.0));

        let one = summarize(&[5.0], "b");
        assert_eq!(one.mean_error, Some(5.0));
        for p in PERCENTILES {
            assert_eq!(one.percentile(p), Some(5.0));
        }

        let empty = summarize(&[], "c");
        assert!(empty.is_empty());
        assert_eq!(empty.mean_error, None);
        assert!(empty.percentiles.is_empty() && empty.cdf.is_empty());
    }

    #[test]
    fn ties_collapse_into_one_step() {
        let r = summarize(&[1.0, 0.0, 1.0, 1.0], "t");
        assert_eq!(r.cdf, vec![(0.0, 0.25), (1.0, 1.0)]);
    }

    #[test]
    fn half_normal_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let errs: Vec<f64> = (0..1000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.abs()
            })
            .collect();
        let p50 = summarize(&errs, "hn").percentile(50).unwrap();
        assert!((0.55..=0.80).contains(&p50), "{p50}");
    }

    fn count(hay: &str, needle: &str) -> usize {
        hay.matches(needle).count()
    }

    #[test]
    fn svg_structure() {
        let a = summarize(&[0.0, 1.0, 2.0], "GP");
        let b = summarize(&[0.5, 1.5], "DGP <deep>");
        let one = render_cdf_svg(std::slice::from_ref(&a)).unwrap();
        assert_eq!(count(&one, "<polyline"), 1);
        let two = render_cdf_svg(&[a, b]).unwrap();
        assert_eq!(count(&two, "<polyline"), 2);
        assert_eq!(count(&two, r#"class="legend""#), 2);
        assert_eq!(count(&two, "stroke-dasharray"), 2);
        for doc in [&one, &two] {
            let parsed = roxmltree::Document::parse(doc).unwrap();
            assert_eq!(parsed.root_element().tag_name().name(), "svg");
            let texts: Vec<_> = parsed
                .descendants()
                .filter_map(|n| n.text())
                .collect();
            assert!(texts.contains(&"error"));
            assert!(texts.contains(&"cumulative fraction"));
        }
        assert!(render_cdf_svg(&[]).is_err());
    }

    #[test]
    fn svg_to_unwritable_path() {
        let r = summarize(&[1.0], "x");
        let err = emit_cdf_svg(&[r], Path::new("/nonexistent-dir/x/cdf.svg")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    proptest! {
        #[test]
        fn cdf_is_a_distribution(errs in prop::collection::vec(0.0f64..10.0, 1..60), rot in 0usize..60) {
            let r = summarize(&errs, "p");
            prop_assert_eq!(r.cdf.last().unwrap().1, 1.0);
            for w in r.cdf.windows(2) {
                prop_assert!(w[0].0 < w[1].0);
                prop_assert!(w[0].1 < w[1].1);
            }
            prop_assert!(r.cdf.iter().all(|&(_, f)| f > 0.0 && f <= 1.0));
            for p in PERCENTILES {
                let v = r.percentile(p).unwrap();
                prop_assert!(r.fraction_at(v) >= p as f64 / 100.0);
                let below = r.cdf.iter().take_while(|c| c.0 < v).last();
                if let Some(&(_, f)) = below {
                    prop_assert!(f < p as f64 / 100.0);
                }
            }
            let mut rotated = errs.clone();
            let k = rot % errs.len();
            rotated.rotate_left(k);
            let r2 = summarize(&rotated, "p");
            prop_assert_eq!(&r.cdf, &r2.cdf);
            prop_assert_eq!(&r.percentiles, &r2.percentiles);
            prop_assert!((r.mean_error.unwrap() - r2.mean_error.unwrap()).abs() < 1e-12);
        }
    }
}
