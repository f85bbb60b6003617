//! Plain-text parameter checkpoints.
//!
//! ```text
//! cef-checkpoint 1
//! groups <count>
//! group <name> <d_out> <d_in>
//! w <d_in values>        # repeated d_out times
//! b <d_out values>
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a checkpoint
//! reloads bit-identically for both `f32` and `f64` stores.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::diff::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "cef-checkpoint 1";

pub fn to_string<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "groups {}", store.len()).unwrap();
    for g in store.groups() {
        writeln!(out, "group {} {} {}", g.name, g.d_out(), g.d_in()).unwrap();
        for row in g.weights.rows() {
            out.push('w');
            for v in row {
                write!(out, " {}", fmt_value(*v)).unwrap();
            }
            out.push('\n');
        }
        out.push('b');
        for v in &g.bias {
            write!(out, " {}", fmt_value(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}

fn fmt_value<T: Scalar>(v: T) -> String {
    // f32 values survive the detour through f64 unchanged
    if std::mem::size_of::<T>() == 4 {
        format!("{:?}", v.to_f32().unwrap())
    } else {
        format!("{:?}", v.as_f64())
    }
}

pub fn from_str<T: Scalar>(text: &str) -> Result<ParamStore<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let err = |line: usize, message: String| Error::Checkpoint { line, message };

    let (ln, magic) = lines
        .next()
        .ok_or_else(|| err(1, "empty checkpoint".into()))?;
    if magic != MAGIC {
        return Err(err(ln, format!("expected `{MAGIC}`, found `{magic}`")));
    }
    let (ln, header) = lines
        .next()
        .ok_or_else(|| err(2, "missing group count".into()))?;
    let count: usize = header
        .strip_prefix("groups ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| err(ln, format!("malformed group count `{header}`")))?;

    let mut store = ParamStore::new();
    for _ in 0..count {
        let (ln, head) = lines
            .next()
            .ok_or_else(|| err(0, "truncated checkpoint".into()))?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [kw, name, d_out, d_in] = parts[..] else {
            return Err(err(ln, format!("malformed group header `{head}`")));
        };
        let (Ok(d_out), Ok(d_in)) = (d_out.parse::<usize>(), d_in.parse::<usize>()) else {
            return Err(err(ln, format!("malformed group dimensions `{head}`")));
        };
        if kw != "group" {
            return Err(err(ln, format!("expected `group`, found `{kw}`")));
        }
        let mut weights = Array2::zeros((d_out, d_in));
        for r in 0..d_out {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| err(0, "truncated weights".into()))?;
            let vals = parse_values::<T>(row, 'w', d_in).map_err(|m| err(ln, m))?;
            weights.row_mut(r).assign(&Array1::from(vals));
        }
        let (ln, row) = lines
            .next()
            .ok_or_else(|| err(0, "truncated bias".into()))?;
        let bias = Array1::from(parse_values::<T>(row, 'b', d_out).map_err(|m| err(ln, m))?);
        store
            .push(ParamGroup {
                name: name.to_string(),
                weights,
                bias,
            })
            .map_err(|e| err(ln, e.to_string()))?;
    }
    Ok(store)
}

fn parse_values<T: Scalar>(
    line: &str,
    tag: char,
    expected: usize,
) -> std::result::Result<Vec<T>, String> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag.to_string().as_str()) {
        return Err(format!("expected a `{tag}` line"));
    }
    let vals = it
        .map(|tok| {
            tok.parse::<f64>()
                .map(T::lit)
                .map_err(|_| format!("bad number `{tok}`"))
        })
        .collect::<std::result::Result<Vec<T>, String>>()?;
    if vals.len() != expected {
        return Err(format!("expected {expected} values, found {}", vals.len()));
    }
    Ok(vals)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(store))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in 0u64..1000, d_out in 1usize..5, d_in in 0usize..5) {
            let mut s = ParamStore::<f32>::new();
            s.push_init("enc.node.pos", d_out, d_in, seed).unwrap();
            s.push_init("proc.f1", d_in + 1, d_out, seed + 1).unwrap();
            s.groups_mut()[0].bias.mapv_inplace(|_| 0.1f32 + seed as f32 * 1e-3);
            let back: ParamStore<f32> = from_str(&to_string(&s)).unwrap();
            prop_assert_eq!(back, s.clone());
            let wide: ParamStore<f64> = s.cast();
            let back64: ParamStore<f64> = from_str(&to_string(&wide)).unwrap();
            prop_assert_eq!(back64, wide);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "cef-checkpoint 1\ngroups 1\ngroup a 1 2\nw 1.0 oops\nb 0\n";
        match from_str::<f64>(text) {
            Err(Error::Checkpoint { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
