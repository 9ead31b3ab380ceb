//! Side-by-side SVG of a match: inlier ellipses at two standard deviations,
//! correspondence lines, and the remaining feature centers as dots.

use std::fmt::Write;

use crate::features::{FeatureCollection, LocalFeature};
use crate::matcher::MatchResult;

/// Display pixels per activation-grid pixel.
pub const CELL: f64 = 8.0;
const GAP: f64 = 16.0;
const PALETTE: [&str; 12] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45", "#469990", "#9a6324",
    "#800000", "#000075",
];

pub fn channel_color(channel: u32) -> &'static str {
    PALETTE[channel as usize % PALETTE.len()]
}

fn center(f: &LocalFeature, x0: f64) -> (f64, f64) {
    (x0 + (f.mu[0] + 0.5) * CELL, (f.mu[1] + 0.5) * CELL)
}

fn ellipse(out: &mut String, f: &LocalFeature, x0: f64) {
    let [cc, cr, rr] = f.sigma;
    let mid = 0.5 * (cc + rr);
    let rad = (0.25 * (cc - rr) * (cc - rr) + cr * cr).sqrt();
    let (l1, l2) = (mid + rad, (mid - rad).max(0.0));
    let angle = 0.5 * (2.0 * cr).atan2(cc - rr).to_degrees();
    let (x, y) = center(f, x0);
    let _ = writeln!(
        out,
        r#"<ellipse cx="{x:.2}" cy="{y:.2}" rx="{:.2}" ry="{:.2}" transform="rotate({angle:.2} {x:.2} {y:.2})" fill="none" stroke="{}" stroke-width="1.5"/>"#,
        2.0 * l1.sqrt() * CELL,
        2.0 * l2.sqrt() * CELL,
        channel_color(f.channel)
    );
}

/// Panels are `(width, height)` in activation-grid pixels of the matched scales.
pub fn render_match_svg(
    result: &MatchResult,
    p1: &FeatureCollection,
    p2: &FeatureCollection,
    size1: (usize, usize),
    size2: (usize, usize),
) -> String {
    let (w1, h1) = (size1.0 as f64 * CELL, size1.1 as f64 * CELL);
    let (w2, h2) = (size2.0 as f64 * CELL, size2.1 as f64 * CELL);
    let x2 = w1 + GAP;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
        x2 + w2,
        h1.max(h2),
        x2 + w2,
        h1.max(h2)
    );
    let _ = writeln!(
        out,
        r##"<rect class="panel" x="0" y="0" width="{w1:.0}" height="{h1:.0}" fill="#f4f4f4" stroke="#888"/>"##
    );
    let _ = writeln!(
        out,
        r##"<rect class="panel" x="{x2:.0}" y="0" width="{w2:.0}" height="{h2:.0}" fill="#f4f4f4" stroke="#888"/>"##
    );

    let (s1, s2) = result.scale_pair;
    let inliers: Vec<_> = result.iter_inliers().collect();
    let matched =
        |f: &LocalFeature, side: usize| inliers.iter().any(|c| if side == 0 { c.p1 == *f } else { c.p2 == *f });
    for (side, coll, scale, x0) in [(0, p1, s1, 0.0), (1, p2, s2, x2)] {
        for f in coll.iter().filter(|f| f.scale_index as usize == scale && !matched(f, side)) {
            let (x, y) = center(f, x0);
            let _ = writeln!(out, r##"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="#999"/>"##);
        }
    }
    for c in &inliers {
        ellipse(&mut out, &c.p1, 0.0);
        ellipse(&mut out, &c.p2, x2);
    }
    for c in &inliers {
        let (a, b) = (center(&c.p1, 0.0), center(&c.p2, x2));
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1"/>"#,
            a.0,
            a.1,
            b.0,
            b.1,
            channel_color(c.channel)
        );
    }
    out.push_str("</svg>\n");
    out
}
