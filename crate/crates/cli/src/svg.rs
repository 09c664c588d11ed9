//! Side-by-side match figures.

use std::fmt::Write;

use oblimatch::descfield::KeypointSet;

const GAP: f64 = 20.0;
const CORRECT: &str = "#2ca02c";
const WRONG: &str = "#d62728";
const UNKNOWN: &str = "#1f77b4";

/// One match line; `correct` is `None` without ground truth.
pub struct Line {
    pub a: usize,
    pub b: usize,
    pub correct: Option<bool>,
}

/// Both keypoint sets side by side (A left, B right) with match lines in
/// green (correct), red (incorrect) or blue (no ground truth).
pub fn render(kps_a: &KeypointSet, kps_b: &KeypointSet, lines: &[Line]) -> String {
    let (wa, ha) = (kps_a.image_size.0 as f64, kps_a.image_size.1 as f64);
    let (wb, hb) = (kps_b.image_size.0 as f64, kps_b.image_size.1 as f64);
    let width = wa + GAP + wb;
    let height = ha.max(hb);
    let offset = wa + GAP;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{wa}" height="{ha}" fill="#f4f4f4" stroke="#888"/>"##
    );
    let _ = writeln!(
        s,
        r##"<rect x="{offset}" y="0" width="{wb}" height="{hb}" fill="#f4f4f4" stroke="#888"/>"##
    );
    let mut points = |kps: &KeypointSet, dx: f64, id: &str| {
        let _ = writeln!(s, r##"<g id="{id}" fill="#333">"##);
        for p in &kps.coords {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, p.x + dx, p.y);
        }
        let _ = writeln!(s, "</g>");
    };
    points(kps_a, 0.0, "keypoints-a");
    points(kps_b, offset, "keypoints-b");

    let _ = writeln!(s, r#"<g id="matches" stroke-width="1" stroke-opacity="0.8">"#);
    for l in lines {
        let pa = kps_a.coords[l.a];
        let pb = kps_b.coords[l.b];
        let color = match l.correct {
            Some(true) => CORRECT,
            Some(false) => WRONG,
            None => UNKNOWN,
        };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}"/>"#,
            pa.x,
            pa.y,
            pb.x + offset,
            pb.y
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    s
}
