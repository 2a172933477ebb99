//! Reader and writer for the g2o text dialect (`SE2` and `SE3:QUAT` records).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use super::{PoseGraph, PoseId, RelativeMeasurement, SePose};
use crate::error::{Error, Result};

struct RawEdge {
    line: usize,
    from: i64,
    to: i64,
    transform: SePose,
    weight_rotation: f64,
    weight_translation: f64,
}

fn numbers(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("not a number: {f:?}"),
            })
        })
        .collect()
}

fn id(field: &str, line: usize) -> Result<i64> {
    field.parse::<i64>().map_err(|_| Error::Parse {
        line,
        message: format!("bad vertex id {field:?}"),
    })
}

fn expect_len(fields: &[&str], n: usize, tag: &str, line: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::Parse {
            line,
            message: format!("{tag} expects {n} fields, found {}", fields.len()),
        });
    }
    Ok(())
}

fn quaternion_rotation(q: &[f64], line: usize) -> Result<Matrix3<f64>> {
    let raw = Quaternion::new(q[3], q[0], q[1], q[2]);
    if raw.norm() < 1e-12 {
        return Err(Error::Parse {
            line,
            message: "zero quaternion".into(),
        });
    }
    Ok(*UnitQuaternion::from_quaternion(raw).to_rotation_matrix().matrix())
}

fn isotropic_weights(diag_translation: &[f64], diag_rotation: &[f64], line: usize) -> Result<(f64, f64)> {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (wt, wr) = (mean(diag_translation), mean(diag_rotation));
    if !(wt > 0.0 && wr > 0.0) {
        return Err(Error::Parse {
            line,
            message: "information matrix has non-positive diagonal".into(),
        });
    }
    Ok((wr, wt))
}

/// Reads a g2o file of the given dimension. Vertex ids are remapped onto
/// `0..N` in ascending order when they are not already contiguous; isotropic
/// weights are the means of the translation and rotation diagonals of each
/// information matrix.
pub fn parse_g2o<R: BufRead>(reader: R, dim: usize) -> Result<PoseGraph> {
    let (vertex_tag, edge_tag) = match dim {
        2 => ("VERTEX_SE2", "EDGE_SE2"),
        3 => ("VERTEX_SE3:QUAT", "EDGE_SE3:QUAT"),
        _ => return Err(Error::Domain(format!("dimension must be 2 or 3, got {dim}"))),
    };
    let mut vertices: BTreeMap<i64, SePose> = BTreeMap::new();
    let mut raw_edges = Vec::new();

    for (index, text) in reader.lines().enumerate() {
        let line = index + 1;
        let text = text?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        let Some(&tag) = fields.first() else { continue };
        if tag.starts_with('#') || tag == "FIX" {
            continue;
        }
        if tag == vertex_tag {
            let pose = if dim == 2 {
                expect_len(&fields, 5, tag, line)?;
                let v = numbers(&fields[2..], line)?;
                SePose::planar(v[0], v[1], v[2])
            } else {
                expect_len(&fields, 9, tag, line)?;
                let v = numbers(&fields[2..], line)?;
                SePose {
                    rotation: quaternion_rotation(&v[3..7], line)?,
                    translation: Vector3::new(v[0], v[1], v[2]),
                }
            };
            let vid = id(fields[1], line)?;
            if vertices.insert(vid, pose).is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate vertex {vid}"),
                });
            }
        } else if tag == edge_tag {
            let field = |k: usize| fields.get(k).copied().unwrap_or("");
            let (from, to) = (id(field(1), line)?, id(field(2), line)?);
            let edge = if dim == 2 {
                expect_len(&fields, 12, tag, line)?;
                let v = numbers(&fields[3..], line)?;
                let info = &v[3..];
                // upper triangle of the (x, y, θ) information matrix
                let (wr, wt) = isotropic_weights(&[info[0], info[3]], &[info[5]], line)?;
                RawEdge {
                    line,
                    from,
                    to,
                    transform: SePose::planar(v[0], v[1], v[2]),
                    weight_rotation: wr,
                    weight_translation: wt,
                }
            } else {
                expect_len(&fields, 31, tag, line)?;
                let v = numbers(&fields[3..], line)?;
                let info = &v[7..];
                // diagonal positions in the row-major upper triangle of a 6×6
                let (wr, wt) = isotropic_weights(&[info[0], info[6], info[11]], &[info[15], info[18], info[20]], line)?;
                RawEdge {
                    line,
                    from,
                    to,
                    transform: SePose {
                        rotation: quaternion_rotation(&v[3..7], line)?,
                        translation: Vector3::new(v[0], v[1], v[2]),
                    },
                    weight_rotation: wr,
                    weight_translation: wt,
                }
            };
            raw_edges.push(edge);
        } else {
            return Err(Error::Parse {
                line,
                message: format!("unexpected record {tag:?} for a {dim}D graph"),
            });
        }
    }

    let contiguous = vertices.keys().enumerate().all(|(k, &v)| v == k as i64);
    if !contiguous {
        log::warn!(
            "vertex ids are not contiguous; remapping {} vertices onto 0..N",
            vertices.len()
        );
    }
    let remap: BTreeMap<i64, usize> = vertices.keys().enumerate().map(|(k, &v)| (v, k)).collect();
    let lookup = |vid: i64, line: usize| {
        remap.get(&vid).copied().ok_or_else(|| Error::Parse {
            line,
            message: format!("edge references undeclared vertex {vid}"),
        })
    };
    let mut edges = Vec::with_capacity(raw_edges.len());
    for e in raw_edges {
        edges.push(RelativeMeasurement {
            from: PoseId::new(0, lookup(e.from, e.line)?),
            to: PoseId::new(0, lookup(e.to, e.line)?),
            rotation: e.transform.rotation,
            translation: e.transform.translation,
            weight_rotation: e.weight_rotation,
            weight_translation: e.weight_translation,
        });
    }
    Ok(PoseGraph {
        dim,
        vertices: vertices.into_values().collect(),
        edges,
    })
}

pub fn parse_g2o_str(text: &str, dim: usize) -> Result<PoseGraph> {
    parse_g2o(text.as_bytes(), dim)
}

fn planar_angle(rot: &Matrix3<f64>) -> f64 {
    rot[(1, 0)].atan2(rot[(0, 0)])
}

fn quaternion_fields(rot: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(rot);
    [q.i, q.j, q.k, q.w]
}

/// Serializes a graph with diagonal information matrices built from the
/// isotropic weights.
pub fn write_g2o(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (k, v) in graph.vertices.iter().enumerate() {
        let t = v.translation;
        if graph.dim == 2 {
            writeln!(
                out,
                "VERTEX_SE2 {k} {:e} {:e} {:e}",
                t[0],
                t[1],
                planar_angle(&v.rotation)
            )
            .unwrap();
        } else {
            let q = quaternion_fields(&v.rotation);
            writeln!(
                out,
                "VERTEX_SE3:QUAT {k} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
                t[0], t[1], t[2], q[0], q[1], q[2], q[3]
            )
            .unwrap();
        }
    }
    for e in &graph.edges {
        let t = e.translation;
        let (wt, wr) = (e.weight_translation, e.weight_rotation);
        if graph.dim == 2 {
            writeln!(
                out,
                "EDGE_SE2 {} {} {:e} {:e} {:e} {wt:e} 0 0 {wt:e} 0 {wr:e}",
                e.from.step,
                e.to.step,
                t[0],
                t[1],
                planar_angle(&e.rotation)
            )
            .unwrap();
        } else {
            let q = quaternion_fields(&e.rotation);
            write!(
                out,
                "EDGE_SE3:QUAT {} {} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
                e.from.step, e.to.step, t[0], t[1], t[2], q[0], q[1], q[2], q[3]
            )
            .unwrap();
            for row in 0..6 {
                for col in row..6 {
                    let value = match (row == col, row < 3) {
                        (true, true) => wt,
                        (true, false) => wr,
                        _ => 0.0,
                    };
                    write!(out, " {value:e}").unwrap();
                }
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::padded_identity;

    #[test]
    fn minimal_planar_fixture() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nEDGE_SE2 0 1 0 0 0 7 0 0 7 0 7\n";
        let g = parse_g2o_str(text, 2).unwrap();
        assert_eq!((g.num_poses(), g.num_edges()), (2, 1));
        let e = &g.edges[0];
        assert_eq!(e.rotation, padded_identity(2));
        assert_eq!((e.weight_rotation, e.weight_translation), (7.0, 7.0));
    }

    #[test]
    fn weights_are_diagonal_means() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nEDGE_SE2 0 1 1 0 0 10 1 2 30 3 500\n";
        let e = parse_g2o_str(text, 2).unwrap().edges[0];
        assert_eq!(e.weight_translation, 20.0);
        assert_eq!(e.weight_rotation, 500.0);
    }

    #[test]
    fn spatial_records() {
        let mut text = String::from(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0.7071067811865476 0.7071067811865476\n",
        );
        text.push_str("EDGE_SE3:QUAT 0 1 1 0 0 0 0 0.7071067811865476 0.7071067811865476");
        for v in [
            4., 0., 0., 0., 0., 0., 4., 0., 0., 0., 0., 4., 0., 0., 0., 9., 0., 0., 9., 0., 9.,
        ] {
            text.push_str(&format!(" {v}"));
        }
        let g = parse_g2o_str(&text, 3).unwrap();
        let e = g.edges[0];
        assert_eq!((e.weight_translation, e.weight_rotation), (4.0, 9.0));
        assert!((e.rotation[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 x 0 0\n";
        match parse_g2o_str(text, 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let short = "VERTEX_SE2 0 0 0 0\nEDGE_SE2 0 0 1\n";
        assert!(matches!(parse_g2o_str(short, 2), Err(Error::Parse { line: 2, .. })));
        let foreign = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n";
        assert!(matches!(parse_g2o_str(foreign, 2), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sparse_ids_are_remapped() {
        let text = "VERTEX_SE2 10 0 0 0\nVERTEX_SE2 30 1 0 0\nVERTEX_SE2 20 2 0 0\n\
                    EDGE_SE2 10 30 1 0 0 1 0 0 1 0 1\nEDGE_SE2 30 20 1 0 0 1 0 0 1 0 1\n";
        let g = parse_g2o_str(text, 2).unwrap();
        assert_eq!(g.edges[0].to, PoseId::new(0, 2));
        assert_eq!(g.edges[1].to, PoseId::new(0, 1));
        assert_eq!(g.vertices[1].translation[0], 2.0);
    }

    #[test]
    fn undeclared_vertex_is_an_error() {
        let text = "VERTEX_SE2 0 0 0 0\nEDGE_SE2 0 5 1 0 0 1 0 0 1 0 1\n";
        assert!(matches!(parse_g2o_str(text, 2), Err(Error::Parse { line: 2, .. })));
    }
}
