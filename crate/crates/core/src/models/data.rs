//! Synthetic data generation and the dataset CSV format.
//!
//! CSV layout: header `n,t,x1..xD,y`, one row per `(n, t)` observation.

use std::io::{Read, Write};

use crate::error::{check_dim, Error, Result};
use crate::math::{sigmoid, softplus};
use crate::model::{DataPoint, Dataset};
use crate::rng::{derive_stream, Purpose, StreamKey};

/// The ground-truth parameters of the synthetic relogit experiment:
/// `η = 1.0, w_0 = 0, w = (0.25, 0.50, 0.75)`.
pub const RELOGIT_THETA_STAR: [f64; 5] = [1.0, 0.0, 0.25, 0.5, 0.75];

pub const DEFAULT_N: usize = 5000;
pub const DEFAULT_T: usize = 2;

/// A dataset together with everything needed to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub seed: u64,
    pub theta_star: Vec<f64>,
}

/// Draws `n` individuals with `t` observations each from the random-effect
/// logistic model at `theta_star = (η, w_0, w_1..w_D)`.
pub fn generate_relogit_data(n: usize, t: usize, theta_star: &[f64], seed: u64) -> Result<SyntheticDataset> {
    if n == 0 || t == 0 {
        return Err(Error::InvalidArgument("N and T must be at least 1".into()));
    }
    if theta_star.len() < 2 {
        return Err(Error::InvalidArgument(
            "relogit parameters must be (eta, w0, w1..wD)".into(),
        ));
    }
    let d = theta_star.len() - 2;
    let tau = softplus(theta_star[0]).sqrt();
    let points = (0..n)
        .map(|i| {
            let mut s = derive_stream(StreamKey::new(seed, Purpose::Init, 0, i as u64));
            let z = tau * s.normal();
            let mut features = Vec::with_capacity(t * d);
            let mut responses = Vec::with_capacity(t);
            for _ in 0..t {
                let row: Vec<f64> = (0..d).map(|_| s.normal()).collect();
                let logit = z
                    + theta_star[1]
                    + row.iter().zip(&theta_star[2..]).map(|(a, b)| a * b).sum::<f64>();
                responses.push(if s.bernoulli(sigmoid(logit)) { 1.0 } else { 0.0 });
                features.extend(row);
            }
            DataPoint::new(features, responses)
        })
        .collect();
    Ok(SyntheticDataset {
        dataset: Dataset::new(d, t, points)?,
        seed,
        theta_star: theta_star.to_vec(),
    })
}

/// Draws `n` scalar observations from the conjugate model at
/// `theta_star = (μ_0, log τ_0², log σ²)`.
pub fn generate_conjugate_data(n: usize, theta_star: &[f64], seed: u64) -> Result<SyntheticDataset> {
    check_dim("conjugate theta", 3, theta_star.len())?;
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let (tau, sigma) = ((theta_star[1].exp()).sqrt(), (theta_star[2].exp()).sqrt());
    let points = (0..n)
        .map(|i| {
            let mut s = derive_stream(StreamKey::new(seed, Purpose::Init, 0, i as u64));
            let z = theta_star[0] + tau * s.normal();
            DataPoint::scalar(z + sigma * s.normal())
        })
        .collect();
    Ok(SyntheticDataset {
        dataset: Dataset::new(0, 1, points)?,
        seed,
        theta_star: theta_star.to_vec(),
    })
}

pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = data.feature_dim;
    let mut header = vec!["n".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.push("y".into());
    w.write_record(&header)?;
    for (n, p) in data.points.iter().enumerate() {
        for t in 0..data.obs_per_point {
            let mut rec = vec![n.to_string(), t.to_string()];
            rec.extend(p.features[t * d..(t + 1) * d].iter().map(|v| v.to_string()));
            rec.push(p.responses[t].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "n" || cols[1] != "t" || cols[cols.len() - 1] != "y" {
        return Err(Error::Parse(format!("expected header n,t,x1..xD,y, got {}", cols.join(","))));
    }
    let d = cols.len() - 3;
    for (i, c) in cols[2..2 + d].iter().enumerate() {
        if *c != format!("x{}", i + 1) {
            return Err(Error::Parse(format!("unexpected column {c}")));
        }
    }

    let mut points: Vec<DataPoint> = Vec::new();
    let mut obs_per_point: Option<usize> = None;
    let mut current: Option<(usize, DataPoint)> = None;
    let parse = |s: &str, line: u64| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("line {line}: {e}")))
    };

    let finish = |pt: DataPoint, points: &mut Vec<DataPoint>, obs: &mut Option<usize>| -> Result<()> {
        let t = pt.responses.len();
        match obs {
            Some(expected) if *expected != t => {
                return Err(Error::Parse(format!(
                    "individual {} has {t} observations, expected {expected}",
                    points.len()
                )))
            }
            _ => *obs = Some(t),
        }
        points.push(pt);
        Ok(())
    };

    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let n: usize = rec[0]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let feats = (2..2 + d).map(|c| parse(&rec[c], line)).collect::<Result<Vec<_>>>()?;
        let y = parse(&rec[2 + d], line)?;
        match current.as_mut() {
            Some((cur, pt)) if *cur == n => {
                pt.features.extend(feats);
                pt.responses.push(y);
            }
            _ => {
                if let Some((_, pt)) = current.take() {
                    finish(pt, &mut points, &mut obs_per_point)?;
                }
                if n != points.len() {
                    return Err(Error::Parse(format!(
                        "line {line}: individuals must be numbered consecutively from 0"
                    )));
                }
                current = Some((n, DataPoint::new(feats, vec![y])));
            }
        }
    }
    if let Some((_, pt)) = current.take() {
        finish(pt, &mut points, &mut obs_per_point)?;
    }
    Dataset::new(d, obs_per_point.unwrap_or(1), points)
}
