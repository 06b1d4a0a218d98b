//! Static SVG views of a cloud: XY, XZ and YZ orthographic projections.

use std::collections::BTreeSet;
use std::fmt::Write;

use pcam_core::PointCloud;

pub const WIDTH: u32 = 900;
pub const HEIGHT: u32 = 300;
pub const PANEL: f64 = 300.0;
/// Pixels per model unit; a unit sphere fills 140 of the 150 px half-panel.
pub const SCALE: f64 = 140.0;
pub const MARKER_RADIUS: f64 = 2.0;

/// `(horizontal, vertical, depth)` axes of each panel.
const VIEWS: [(usize, usize, usize, &str); 3] = [(0, 1, 2, "XY"), (0, 2, 1, "XZ"), (1, 2, 0, "YZ")];

/// Marker centres `(x, y)` and grey levels for one panel, far points first.
pub fn panel_markers(cloud: &PointCloud, panel: usize) -> Vec<(f64, f64, u8)> {
    let (h, v, d, _) = VIEWS[panel];
    let x0 = PANEL * panel as f64 + PANEL / 2.0;
    let y0 = PANEL / 2.0;
    let mut pts: Vec<(f64, f64, f64)> = cloud
        .points()
        .iter()
        .map(|p| (round2(x0 + SCALE * p[h]), round2(y0 - SCALE * p[v]), p[d]))
        .collect();
    pts.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.total_cmp(&b.0)).then(a.1.total_cmp(&b.1)));
    let mut seen = BTreeSet::new();
    pts.into_iter()
        .filter(|&(x, y, _)| seen.insert((x.to_bits(), y.to_bits())))
        .map(|(x, y, depth)| {
            // nearer (larger depth) is darker
            let t = ((depth + 1.0) / 2.0).clamp(0.0, 1.0);
            (x, y, (200.0 - 160.0 * t).round() as u8)
        })
        .collect()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn render(cloud: &PointCloud) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for (i, (_, _, _, label)) in VIEWS.iter().enumerate() {
        let x = PANEL * i as f64;
        let _ = writeln!(s, r#"<g id="{label}">"#);
        let _ = writeln!(s, r##"<rect x="{x}" y="0" width="{PANEL}" height="{PANEL}" fill="none" stroke="#ccc"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="16" font-family="monospace" font-size="12">{label}</text>"#, x + 6.0);
        for (cx, cy, g) in panel_markers(cloud, i) {
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{MARKER_RADIUS}" fill="rgb({g},{g},{g})"/>"#);
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
