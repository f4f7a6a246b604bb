//! Two-panel polyline plot of `ρᴵ(t)` and the cross-section volume.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const PANEL: f64 = 220.0;
const MARGIN: f64 = 50.0;

fn panel(out: &mut String, top: f64, label: &str, xs: &[f64], ys: &[f64], colour: &str) {
    let (x0, x1) = bounds(xs);
    let (mut y0, mut y1) = bounds(ys);
    if y1 - y0 < 1e-300 {
        y0 -= 0.5 * y0.abs().max(1.0);
        y1 += 0.5 * y1.abs().max(1.0);
    }
    let w = WIDTH - 2.0 * MARGIN;
    let h = PANEL - MARGIN;
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-300) * w;
    let py = |y: f64| top + h - (y - y0) / (y1 - y0) * h;
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{top}" width="{w}" height="{h}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(out, r##"<text x="{MARGIN}" y="{:.1}" font-size="13">{label}</text>"##, top - 6.0);
    let _ = writeln!(
        out,
        r##"<text x="4" y="{:.1}" font-size="10">{y1:.4e}</text><text x="4" y="{:.1}" font-size="10">{y0:.4e}</text>"##,
        top + 10.0,
        top + h
    );
    let _ = writeln!(
        out,
        r##"<text x="{MARGIN}" y="{:.1}" font-size="10">{x0}</text><text x="{:.1}" y="{:.1}" font-size="10">{x1}</text>"##,
        top + h + 14.0,
        MARGIN + w - 20.0,
        top + h + 14.0
    );
    let points: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"##,
        points.join(" ")
    );
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

pub fn funnel_svg(times: &[f64], rho: &[f64], volumes: &[f64]) -> String {
    let height = 2.0 * PANEL + MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"##
    );
    panel(&mut out, MARGIN * 0.6, "rho(t)", times, rho, "#1f5fa8");
    panel(&mut out, MARGIN * 0.6 + PANEL, "cross-section volume", times, volumes, "#b8431b");
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_polylines_with_one_point_per_sample() {
        let svg = funnel_svg(&[0.0, 0.5, 1.0], &[3.0, 2.0, 1.0], &[1.0, 1.0, 1.0]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        let first = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(first.split(' ').count(), 3);
    }
}
