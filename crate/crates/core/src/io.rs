//! CSV dumps of flows, value functions, kernels, level sets and paths.
//!
//! Floats are written in their shortest round-trip form, so reading a file
//! back reproduces the stored numbers bit for bit.

use std::io::{BufRead, Write};

use crate::analysis::SampledPath;
use crate::error::{MfgError, Result};
use crate::fixedpoint::FPReport;
use crate::hjb::{KernelRows, SparseKernel, ValuePolicy};
use crate::lattice::LevelSets;
use crate::transport::Flow;

/// Shortest decimal representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn io_err(e: std::io::Error) -> MfgError {
    MfgError::Usage(format!("i/o error: {e}"))
}

fn coord_names(prefix: &str, d: usize) -> String {
    (1..=d).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

pub fn flow_header(d: usize) -> String {
    format!("k,t,{},mass", coord_names("x", d))
}

/// `k,t,x1..xd,mass`, one line per node of every `S_k`.
pub fn write_flow<W: Write>(w: &mut W, ls: &LevelSets, flow: &Flow, dt: f64) -> Result<()> {
    flow.check_shape(ls)?;
    writeln!(w, "{}", flow_header(ls.dim)).map_err(io_err)?;
    for (k, set) in ls.sets.iter().enumerate() {
        let t = fmt_f64(k as f64 * dt);
        let mut line = String::new();
        let mut res = Ok(());
        set.for_each_in(0, set.len(), |id, idx| {
            if res.is_err() {
                return;
            }
            line.clear();
            line.push_str(&format!("{k},{t}"));
            for &i in idx {
                line.push(',');
                line.push_str(&fmt_f64(i as f64 * ls.dx));
            }
            line.push(',');
            line.push_str(&fmt_f64(flow.marginals[k][id]));
            res = writeln!(w, "{line}");
        });
        res.map_err(io_err)?;
    }
    Ok(())
}

fn parse_fields(line: &str, lineno: usize, expected: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != expected {
        return Err(MfgError::Usage(format!(
            "line {lineno}: expected {expected} fields, found {}",
            fields.len()
        )));
    }
    Ok(fields)
}

fn parse_num<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T> {
    s.parse()
        .map_err(|_| MfgError::Usage(format!("line {lineno}: cannot parse `{s}`")))
}

/// Reads a file written by [`write_flow`] onto the given level sets.
pub fn read_flow<R: BufRead>(r: R, ls: &LevelSets) -> Result<Flow> {
    let d = ls.dim;
    let mut marginals: Vec<Vec<f64>> = ls.sets.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut idx = vec![0i64; d];
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(&line, n + 1, d + 3)?;
        let k: usize = parse_num(f[0], n + 1)?;
        for a in 0..d {
            let x: f64 = parse_num(f[2 + a], n + 1)?;
            idx[a] = (x / ls.dx).round() as i64;
        }
        let mass: f64 = parse_num(f[d + 2], n + 1)?;
        let id = ls
            .sets
            .get(k)
            .and_then(|s| s.id_of(&idx))
            .ok_or_else(|| MfgError::Usage(format!("line {}: node {idx:?} not in S_{k}", n + 1)))?;
        marginals[k][id] = mass;
    }
    Ok(Flow { marginals })
}

/// `k,x1..xd,value`.
pub fn write_values<W: Write>(w: &mut W, ls: &LevelSets, vp: &ValuePolicy) -> Result<()> {
    writeln!(w, "k,{},value", coord_names("x", ls.dim)).map_err(io_err)?;
    for (k, set) in ls.sets.iter().enumerate() {
        let mut res = Ok(());
        set.for_each_in(0, set.len(), |id, idx| {
            if res.is_err() {
                return;
            }
            let coords: Vec<String> = idx.iter().map(|&i| fmt_f64(i as f64 * ls.dx)).collect();
            res = writeln!(w, "{k},{},{}", coords.join(","), fmt_f64(vp.values[k][id]));
        });
        res.map_err(io_err)?;
    }
    Ok(())
}

pub fn kernel_header(d: usize) -> String {
    format!("k,{},{},probability", coord_names("x_i", d), coord_names("y_i", d))
}

/// `k,x_i1..x_id,y_i1..y_id,probability`: every nonzero kernel entry with
/// source and target lattice indices.
pub fn write_kernel<W: Write>(w: &mut W, ls: &LevelSets, kernel: &dyn KernelRows) -> Result<()> {
    writeln!(w, "{}", kernel_header(ls.dim)).map_err(io_err)?;
    let mut src = vec![0i64; ls.dim];
    let mut dst = vec![0i64; ls.dim];
    for k in 0..ls.n_t() {
        let mut res = Ok(());
        kernel.for_rows(k, 0, ls.get(k).len(), &mut |id, row| {
            if res.is_err() {
                return;
            }
            ls.get(k).index_of(id, &mut src);
            let s: Vec<String> = src.iter().map(i64::to_string).collect();
            let s = s.join(",");
            for &(t, p) in row {
                ls.get(k + 1).index_of(t, &mut dst);
                let dd: Vec<String> = dst.iter().map(i64::to_string).collect();
                if let Err(e) = writeln!(w, "{k},{s},{},{}", dd.join(","), fmt_f64(p)) {
                    res = Err(e);
                    return;
                }
            }
        })?;
        res.map_err(io_err)?;
    }
    Ok(())
}

/// Reads a file written by [`write_kernel`].
pub fn read_kernel<R: BufRead>(r: R, ls: &LevelSets) -> Result<SparseKernel> {
    let d = ls.dim;
    let mut triplets = Vec::new();
    let mut src = vec![0i64; d];
    let mut dst = vec![0i64; d];
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(&line, n + 1, 2 * d + 2)?;
        let k: usize = parse_num(f[0], n + 1)?;
        for a in 0..d {
            src[a] = parse_num(f[1 + a], n + 1)?;
            dst[a] = parse_num(f[1 + d + a], n + 1)?;
        }
        let p: f64 = parse_num(f[2 * d + 1], n + 1)?;
        if k >= ls.n_t() {
            return Err(MfgError::Usage(format!("line {}: step {k} out of range", n + 1)));
        }
        let (Some(s), Some(t)) = (ls.get(k).id_of(&src), ls.get(k + 1).id_of(&dst)) else {
            return Err(MfgError::Usage(format!("line {}: entry outside the level sets", n + 1)));
        };
        triplets.push((k, s, t, p));
    }
    SparseKernel::from_triplets(&ls.sizes(), &triplets)
}

/// `k,i1..id,x1..xd`.
pub fn write_level_sets<W: Write>(w: &mut W, ls: &LevelSets) -> Result<()> {
    writeln!(w, "k,{},{}", coord_names("i", ls.dim), coord_names("x", ls.dim)).map_err(io_err)?;
    for (k, set) in ls.sets.iter().enumerate() {
        let mut res = Ok(());
        set.for_each_in(0, set.len(), |_, idx| {
            if res.is_err() {
                return;
            }
            let is: Vec<String> = idx.iter().map(i64::to_string).collect();
            let xs: Vec<String> = idx.iter().map(|&i| fmt_f64(i as f64 * ls.dx)).collect();
            res = writeln!(w, "{k},{},{}", is.join(","), xs.join(","));
        });
        res.map_err(io_err)?;
    }
    Ok(())
}

pub fn paths_header(d: usize) -> String {
    format!("path_id,k,t,{}", coord_names("x", d))
}

/// `path_id,k,t,x1..xd`.
pub fn write_paths<W: Write>(w: &mut W, dim: usize, paths: &[SampledPath]) -> Result<()> {
    writeln!(w, "{}", paths_header(dim)).map_err(io_err)?;
    for (i, p) in paths.iter().enumerate() {
        for (k, (t, s)) in p.times.iter().zip(&p.states).enumerate() {
            let xs: Vec<String> = s.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(w, "{i},{k},{},{}", fmt_f64(*t), xs.join(",")).map_err(io_err)?;
        }
    }
    Ok(())
}

/// `iteration,stage,delta,error`.
pub fn write_error_trace<W: Write>(w: &mut W, report: &FPReport) -> Result<()> {
    writeln!(w, "iteration,stage,delta,error").map_err(io_err)?;
    let mut it = 0usize;
    for (s, stage) in report.stages.iter().enumerate() {
        for e in &report.error_trace[it..it + stage.iterations] {
            it += 1;
            writeln!(w, "{it},{},{},{}", s + 1, fmt_f64(stage.delta), fmt_f64(*e)).map_err(io_err)?;
        }
    }
    Ok(())
}
