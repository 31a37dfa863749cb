//! Versioned textual checkpoints that round-trip bit for bit.
//!
//! Floats are stored as hexadecimal bit patterns, so parsing recovers the
//! exact `f64` values regardless of decimal formatting behavior.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::tensor::Tensor;

use super::optimizer::AdamState;
use super::outer::{BestSnapshot, MetaState};

const MAGIC: &str = "gbml-checkpoint v1";

fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:016x}", v.to_bits());
    }
    out.push('\n');
}

fn parse_floats(line: &str, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|tok| {
            u64::from_str_radix(tok, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::Checkpoint {
                    reason: format!("bad float token `{tok}`"),
                })
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::Checkpoint {
            reason: format!("expected {expected} floats, found {}", values.len()),
        });
    }
    Ok(values)
}

fn push_params(out: &mut String, tag: &str, params: &ParamVector) {
    for (name, tensor) in params.entries() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "{tag} {name} {}", dims.join(" "));
        push_floats(out, tensor.data());
    }
}

pub fn serialize(state: &MetaState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "epoch {}", state.epoch);
    let _ = writeln!(out, "entries {}", state.theta0.num_entries());
    let _ = writeln!(out, "adam_t {}", state.adam.t);
    out.push_str("adam_m ");
    push_floats(&mut out, &state.adam.m);
    out.push_str("adam_v ");
    push_floats(&mut out, &state.adam.v);
    push_params(&mut out, "param", &state.theta0);
    if let Some(best) = &state.best_val {
        let _ = writeln!(
            out,
            "best {:016x} {}",
            best.accuracy.to_bits(),
            best.epoch
        );
        push_params(&mut out, "best_param", &best.theta0);
    }
    out
}

pub fn deserialize(text: &str) -> Result<MetaState> {
    let mut lines = text.lines();
    let bad = |reason: &str| Error::Checkpoint {
        reason: reason.to_string(),
    };

    if lines.next() != Some(MAGIC) {
        return Err(bad("missing or unsupported header"));
    }
    let epoch: usize = expect_field(lines.next(), "epoch")?;
    let entries: usize = expect_field(lines.next(), "entries")?;
    let adam_t: u64 = expect_field(lines.next(), "adam_t")?;

    let m_line = lines.next().ok_or_else(|| bad("missing adam_m"))?;
    let m_body = m_line
        .strip_prefix("adam_m ")
        .ok_or_else(|| bad("missing adam_m"))?;
    let v_line = lines.next().ok_or_else(|| bad("missing adam_v"))?;
    let v_body = v_line
        .strip_prefix("adam_v ")
        .ok_or_else(|| bad("missing adam_v"))?;

    let read_params = |lines: &mut std::str::Lines<'_>, tag: &str, count: usize| -> Result<ParamVector> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let header = lines
                .next()
                .ok_or_else(|| bad(&format!("missing {tag} header")))?;
            let mut parts = header.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(bad(&format!("expected {tag} header, got `{header}`")));
            }
            let name = parts
                .next()
                .ok_or_else(|| bad("parameter header missing a name"))?
                .to_string();
            let shape: Vec<usize> = parts
                .map(|d| {
                    d.parse().map_err(|_| Error::Checkpoint {
                        reason: format!("bad dimension `{d}`"),
                    })
                })
                .collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let data_line = lines
                .next()
                .ok_or_else(|| bad(&format!("missing data for `{name}`")))?;
            let data = parse_floats(data_line, len)?;
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(ParamVector::new(out))
    };

    let theta0 = read_params(&mut lines, "param", entries)?;
    let total = theta0.total_len();
    let adam = AdamState {
        m: parse_floats(m_body, total)?,
        v: parse_floats(v_body, total)?,
        t: adam_t,
    };

    let best_val = match lines.next() {
        None => None,
        Some(line) => {
            let body = line
                .strip_prefix("best ")
                .ok_or_else(|| bad(&format!("unexpected trailing line `{line}`")))?;
            let mut parts = body.split_whitespace();
            let acc_bits = parts
                .next()
                .and_then(|t| u64::from_str_radix(t, 16).ok())
                .ok_or_else(|| bad("bad best accuracy"))?;
            let best_epoch: usize = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("bad best epoch"))?;
            let best_theta = read_params(&mut lines, "best_param", entries)?;
            Some(BestSnapshot {
                accuracy: f64::from_bits(acc_bits),
                theta0: best_theta,
                epoch: best_epoch,
            })
        }
    };

    Ok(MetaState {
        theta0,
        adam,
        epoch,
        best_val,
    })
}

fn expect_field<T: std::str::FromStr>(line: Option<&str>, key: &str) -> Result<T> {
    let line = line.ok_or_else(|| Error::Checkpoint {
        reason: format!("missing field `{key}`"),
    })?;
    let value = line
        .strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| Error::Checkpoint {
            reason: format!("expected `{key}`, got `{line}`"),
        })?;
    value.parse().map_err(|_| Error::Checkpoint {
        reason: format!("bad value for `{key}`: `{value}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpModel;
    use crate::rng::SplitRng;

    fn state_with_noise() -> MetaState {
        let model = MlpModel::new(vec![4, 6, 3]).unwrap();
        let theta0 = model.init_params(&mut SplitRng::from_seed(13));
        let mut state = MetaState::new(theta0);
        state.epoch = 7;
        state.adam.t = 21;
        for (i, v) in state.adam.m.iter_mut().enumerate() {
            *v = (i as f64 + 0.1).sin() * 1e-3;
        }
        for (i, v) in state.adam.v.iter_mut().enumerate() {
            *v = (i as f64).cos().abs() * 1e-6;
        }
        state.observe_validation(0.8123456789);
        state
    }

    #[test]
    fn round_trip_is_bitwise() {
        let state = state_with_noise();
        let text = serialize(&state);
        let back = deserialize(&text).unwrap();
        assert_eq!(back.epoch, state.epoch);
        assert!(back.theta0.bitwise_eq(&state.theta0));
        assert!(back.adam.bitwise_eq(&state.adam));
        let (a, b) = (back.best_val.unwrap(), state.best_val.unwrap());
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert!(a.theta0.bitwise_eq(&b.theta0));
        // serialize(deserialize(x)) is byte identical
        let state2 = state_with_noise();
        assert_eq!(serialize(&deserialize(&serialize(&state2)).unwrap()), serialize(&state2));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        assert!(matches!(
            deserialize("gbml-checkpoint v0\n"),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let state = state_with_noise();
        let text = serialize(&state);
        let cut = &text[..text.len() / 2];
        assert!(deserialize(cut).is_err());
    }
}
