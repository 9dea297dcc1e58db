//! Pose files in the long-term localization benchmark layout: one
//! `name qw qx qy qz tx ty tz` line per query, world-to-camera. Queries that
//! could not be localized are written as `name FAILED reason`.

use crate::geometry::Pose;
use std::fmt::Write;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum PoseEntry {
    Pose(Pose),
    Failed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct PoseFileError {
    pub line: usize,
    pub message: String,
}

/// One line, quaternion sign fixed so that `qw >= 0`.
pub fn format_pose_line(name: &str, pose: &Pose) -> String {
    let mut q = pose.wxyz();
    if q[0] < 0.0 {
        q = q.map(|x| -x);
    }
    let t = pose.translation;
    format!("{name} {} {} {} {} {} {} {}", q[0], q[1], q[2], q[3], t.x, t.y, t.z)
}

/// Writes entries sorted by name.
pub fn format_pose_file(entries: &[(String, PoseEntry)]) -> String {
    let mut sorted: Vec<&(String, PoseEntry)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (name, e) in sorted {
        match e {
            PoseEntry::Pose(p) => out.push_str(&format_pose_line(name, p)),
            PoseEntry::Failed(reason) => {
                let _ = write!(out, "{name} FAILED {reason}");
            }
        }
        out.push('\n');
    }
    out
}

/// Parses a pose file. Blank lines and `#` comments are skipped.
pub fn parse_pose_file(text: &str) -> Result<Vec<(String, PoseEntry)>, PoseFileError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| PoseFileError { line: i + 1, message: m };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let name = fields[0].to_string();
        if fields.get(1) == Some(&"FAILED") {
            out.push((name, PoseEntry::Failed(fields[2..].join(" "))));
            continue;
        }
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields (name qw qx qy qz tx ty tz), found {}", fields.len())));
        }
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| err("non-numeric or non-finite value".into()))?;
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        if (norm - 1.0).abs() > 1e-2 {
            return Err(err(format!("quaternion norm {norm} is not close to 1")));
        }
        out.push((name, PoseEntry::Pose(Pose::from_wxyz([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]]))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_error, Point3, Vec3};

    #[test]
    fn round_trip_and_sorting() {
        let a = Pose::look_at(&Point3::new(1.0, 2.0, -3.0), &Point3::origin(), &Vec3::y());
        let entries = vec![
            ("b.jpg".to_string(), PoseEntry::Pose(a)),
            ("a.jpg".to_string(), PoseEntry::Failed("no_hypothesis".into())),
        ];
        let text = format_pose_file(&entries);
        assert!(text.starts_with("a.jpg FAILED no_hypothesis\nb.jpg "));
        let back = parse_pose_file(&text).unwrap();
        assert_eq!(back[0], ("a.jpg".to_string(), PoseEntry::Failed("no_hypothesis".into())));
        let PoseEntry::Pose(p) = &back[1].1 else { panic!() };
        let (t, r) = pose_error(p, &a);
        assert!(t < 1e-12 && r < 1e-9);
        assert!(p.wxyz()[0] >= 0.0);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let e = parse_pose_file("# header\nq1 1 0 0 0 0 0 0\nq2 0 0 0 0 1 2 3\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(parse_pose_file("q1 1 0 0 0 0 0\n").unwrap_err().line, 1);
        assert_eq!(parse_pose_file("q1 1 0 x 0 0 0 0\n").unwrap_err().line, 1);
    }
}
