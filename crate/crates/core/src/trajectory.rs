//! Population-state trajectories and their CSV form.
//!
//! CSV layout: a `t` column, one column per state label holding the overall
//! fraction, then optional `rho_l<k>_<label>` columns for in-degree `k`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    labels: Vec<String>,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    per_degree: BTreeMap<usize, Vec<Vec<f64>>>,
}

fn check_simplex(v: &[f64], k: usize, what: &str) -> Result<()> {
    if v.len() != k {
        return Err(Error::DimensionMismatch {
            what: "trajectory state",
            expected: k,
            actual: v.len(),
        });
    }
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| !(*x >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: {v:?} is off the simplex")));
    }
    Ok(())
}

impl Trajectory {
    pub fn new(labels: Vec<String>, times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_per_degree(labels, times, states, BTreeMap::new())
    }

    pub fn with_per_degree(
        labels: Vec<String>,
        times: Vec<f64>,
        states: Vec<Vec<f64>>,
        per_degree: BTreeMap<usize, Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::DimensionMismatch {
                what: "trajectory length",
                expected: times.len(),
                actual: states.len(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSpec(
                "trajectory times must be strictly increasing".into(),
            ));
        }
        let k = labels.len();
        for s in &states {
            check_simplex(s, k, "overall state")?;
        }
        for (l, rows) in &per_degree {
            if rows.len() != times.len() {
                return Err(Error::DimensionMismatch {
                    what: "per-degree trajectory length",
                    expected: times.len(),
                    actual: rows.len(),
                });
            }
            for s in rows {
                check_simplex(s, k, &format!("in-degree {l} state"))?;
            }
        }
        Ok(Trajectory {
            labels,
            times,
            states,
            per_degree,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn per_degree(&self) -> &BTreeMap<usize, Vec<Vec<f64>>> {
        &self.per_degree
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    pub fn state_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Parse(format!("trajectory has no state `{label}`")))
    }

    /// Fraction of one state over time.
    pub fn column(&self, state: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[state]).collect()
    }

    /// Overall state at `t` by linear interpolation; clamps outside the
    /// recorded window.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let times = &self.times;
        let idx = times.partition_point(|&x| x <= t);
        if idx == 0 {
            return self.states[0].clone();
        }
        if idx == times.len() {
            return self.states[times.len() - 1].clone();
        }
        let (t0, t1) = (times[idx - 1], times[idx]);
        let w = (t - t0) / (t1 - t0);
        self.states[idx - 1]
            .iter()
            .zip(&self.states[idx])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Overall states resampled onto `times` (per-degree data dropped).
    pub fn resample(&self, times: &[f64]) -> Result<Trajectory> {
        Trajectory::new(
            self.labels.clone(),
            times.to_vec(),
            times.iter().map(|&t| self.at(t)).collect(),
        )
    }

    /// Keeps samples with `t >= from`.
    pub fn tail_from(&self, from: f64) -> Trajectory {
        let start = self.times.partition_point(|&t| t < from);
        Trajectory {
            labels: self.labels.clone(),
            times: self.times[start..].to_vec(),
            states: self.states[start..].to_vec(),
            per_degree: self
                .per_degree
                .iter()
                .map(|(&l, rows)| (l, rows[start..].to_vec()))
                .collect(),
        }
    }

    /// Pointwise mean of trajectories sharing one time grid.
    pub fn mean(trajs: &[Trajectory]) -> Result<Trajectory> {
        let first = trajs
            .first()
            .ok_or_else(|| Error::InsufficientData("no trajectories to average".into()))?;
        let n = trajs.len() as f64;
        let mut states = vec![vec![0.0; first.labels.len()]; first.len()];
        let mut per_degree: BTreeMap<usize, Vec<Vec<f64>>> = first
            .per_degree
            .iter()
            .map(|(&l, rows)| (l, vec![vec![0.0; first.labels.len()]; rows.len()]))
            .collect();
        for tr in trajs {
            if tr.times != first.times || tr.labels != first.labels {
                return Err(Error::InvalidSpec("trajectories do not share a time grid".into()));
            }
            for (acc, s) in states.iter_mut().zip(&tr.states) {
                for (a, x) in acc.iter_mut().zip(s) {
                    *a += x / n;
                }
            }
            for (l, rows) in per_degree.iter_mut() {
                let Some(src) = tr.per_degree.get(l) else {
                    return Err(Error::InvalidSpec(format!("trajectory missing in-degree {l}")));
                };
                for (acc, s) in rows.iter_mut().zip(src) {
                    for (a, x) in acc.iter_mut().zip(s) {
                        *a += x / n;
                    }
                }
            }
        }
        Trajectory::with_per_degree(first.labels.clone(), first.times.clone(), states, per_degree)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<trajectory csv>", e);
        let mut header = vec!["t".to_string()];
        header.extend(self.labels.iter().cloned());
        for l in self.per_degree.keys() {
            header.extend(self.labels.iter().map(|lab| format!("rho_l{l}_{lab}")));
        }
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for (i, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.states[i].iter().map(f64::to_string));
            for rows in self.per_degree.values() {
                row.extend(rows[i].iter().map(f64::to_string));
            }
            writeln!(out, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Trajectory> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory csv".into()))?
            .map_err(|e| Error::io("<trajectory csv>", e))?;
        let columns: Vec<&str> = header.trim().split(',').collect();
        if columns.first() != Some(&"t") {
            return Err(Error::Parse("trajectory csv must start with a `t` column".into()));
        }
        let mut labels = Vec::new();
        let mut degree_cols: Vec<(usize, usize)> = Vec::new();
        for (c, name) in columns.iter().enumerate().skip(1) {
            if let Some(rest) = name.strip_prefix("rho_l") {
                let (l, label) = rest
                    .split_once('_')
                    .ok_or_else(|| Error::Parse(format!("bad per-degree column `{name}`")))?;
                let l: usize = l
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad per-degree column `{name}`")))?;
                let z = labels
                    .iter()
                    .position(|x: &String| x == label)
                    .ok_or_else(|| Error::Parse(format!("unknown label in `{name}`")))?;
                degree_cols.push((l, z));
                let _ = c;
            } else if degree_cols.is_empty() {
                labels.push(name.to_string());
            } else {
                return Err(Error::Parse(format!("state column `{name}` after per-degree columns")));
            }
        }
        let k = labels.len();
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut per_degree: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<trajectory csv>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let values: Vec<f64> = line
                .trim()
                .split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("csv value `{v}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != columns.len() {
                return Err(Error::Parse(format!(
                    "row has {} values, header has {}",
                    values.len(),
                    columns.len()
                )));
            }
            times.push(values[0]);
            states.push(values[1..=k].to_vec());
            let row_start = per_degree.values().next().map_or(0, Vec::len);
            for (i, &(l, z)) in degree_cols.iter().enumerate() {
                let rows = per_degree.entry(l).or_default();
                if rows.len() == row_start {
                    rows.push(vec![0.0; k]);
                }
                rows[row_start][z] = values[1 + k + i];
            }
        }
        Trajectory::with_per_degree(labels, times, states, per_degree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        vec!["T".into(), "H".into()]
    }

    #[test]
    fn rejects_off_simplex_and_bad_times() {
        assert!(Trajectory::new(labels(), vec![0.0], vec![vec![0.5, 0.6]]).is_err());
        assert!(Trajectory::new(labels(), vec![0.0, 0.0], vec![vec![1.0, 0.0]; 2]).is_err());
        assert!(Trajectory::new(labels(), vec![0.0], vec![]).is_err());
    }

    #[test]
    fn interpolation() {
        let tr = Trajectory::new(labels(), vec![0.0, 2.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(tr.at(1.0), vec![0.5, 0.5]);
        assert_eq!(tr.at(-1.0), vec![0.0, 1.0]);
        assert_eq!(tr.at(5.0), vec![1.0, 0.0]);
    }

    #[test]
    fn csv_round_trip_with_degrees() {
        let mut pd = BTreeMap::new();
        pd.insert(0, vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        pd.insert(3, vec![vec![0.25, 0.75], vec![0.125, 0.875]]);
        let tr =
            Trajectory::with_per_degree(labels(), vec![0.0, 0.1], vec![vec![0.4, 0.6], vec![0.3, 0.7]], pd).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "t,T,H,rho_l0_T,rho_l0_H,rho_l3_T,rho_l3_H"
        );
        assert_eq!(Trajectory::read_csv(&buf[..]).unwrap(), tr);
    }
}
