//! Network data ingestion: bus/line descriptions are Kron-reduced to the
//! generator internal nodes, direct reduced admittances are taken as given.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::power::{Machine, PowerNetwork, DEFAULT_FREQUENCY};
use crate::error::{Result, SchedError};

const EQUILIBRIUM_TOL: f64 = 1e-10;
const EQUILIBRIUM_MAX_ITER: usize = 100;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: usize,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default)]
    pub load_q: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LineRecord {
    pub from: usize,
    pub to: usize,
    #[serde(default, rename = "R")]
    pub r: f64,
    #[serde(rename = "X")]
    pub x: f64,
    /// Total line charging susceptance, split evenly between the ends.
    #[serde(default, rename = "B")]
    pub b: f64,
    #[serde(default)]
    pub switched: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorRecord {
    #[serde(default)]
    pub bus: Option<usize>,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "Pm")]
    pub pm: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(default)]
    pub xd_transient: Option<f64>,
}

/// On-disk network description. Either `buses` + `lines` or `Y1` + `Y2`
/// must be present.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mva: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buses: Option<Vec<BusRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lines: Option<Vec<LineRecord>>,
    #[serde(default, rename = "Y1", skip_serializing_if = "Option::is_none")]
    pub y1: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, rename = "Y2", skip_serializing_if = "Option::is_none")]
    pub y2: Option<Vec<Vec<[f64; 2]>>>,
    pub generators: Vec<GeneratorRecord>,
    /// Solve for the operating point (default). When false the network is
    /// assumed to be at rest with all angles zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_equilibrium: Option<bool>,
}

type CMatrix = Vec<Vec<Complex64>>;

/// Reads and builds a network from a JSON file.
pub fn load_network(path: impl AsRef<Path>) -> Result<PowerNetwork<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| SchedError::Io(format!("{}: {e}", path.display())))?;
    let file: NetworkFile = serde_json::from_str(&text)
        .map_err(|e| SchedError::Parse(format!("{}: {e}", path.display())))?;
    build_network(&file)
}

/// Builds a network (with its operating point) from parsed data.
pub fn build_network(file: &NetworkFile) -> Result<PowerNetwork<f64>> {
    let (y1, y2) = match (&file.y1, &file.y2, &file.buses, &file.lines) {
        (Some(a), Some(b), _, _) => (direct_matrix(a, "Y1")?, direct_matrix(b, "Y2")?),
        (Some(_), None, _, _) | (None, Some(_), _, _) => {
            return Err(SchedError::Network(
                "direct form needs both Y1 and Y2".into(),
            ))
        }
        (None, None, Some(buses), Some(lines)) => (
            reduced_admittance(buses, lines, &file.generators, false)?,
            reduced_admittance(buses, lines, &file.generators, true)?,
        ),
        _ => {
            return Err(SchedError::Network(
                "network file needs buses and lines, or Y1 and Y2".into(),
            ))
        }
    };
    let m = file.generators.len();
    if y1.len() != m || y2.len() != m {
        return Err(SchedError::Network(format!(
            "reduced admittance is {}x{}, but {m} generators are listed",
            y1.len(),
            y2.len()
        )));
    }
    let machines = file
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if !(g.h > 0.0) || !g.pm.is_finite() || !(g.e > 0.0) {
                return Err(SchedError::Network(format!(
                    "generator {}: H and E must be positive, Pm finite",
                    i + 1
                )));
            }
            Ok(Machine {
                inertia: g.h,
                mech_power: g.pm,
                voltage: g.e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flat = |y: &CMatrix| y.iter().flatten().map(|c| (c.re, c.im)).collect::<Vec<_>>();
    let mut net = PowerNetwork::new(
        machines,
        flat(&y1),
        flat(&y2),
        file.frequency.unwrap_or(DEFAULT_FREQUENCY),
    )?;
    if file.solve_equilibrium.unwrap_or(true) {
        let delta = solve_equilibrium(&mut net)?;
        net.set_equilibrium(delta)?;
    }
    Ok(net)
}

fn direct_matrix(rows: &[Vec<[f64; 2]>], name: &str) -> Result<CMatrix> {
    let n = rows.len();
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != n {
                return Err(SchedError::Network(format!(
                    "{name} row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            Ok(row.iter().map(|&[re, im]| Complex64::new(re, im)).collect())
        })
        .collect()
}

/// Bus admittance augmented with generator internal nodes and reduced to
/// them. `switched_on` doubles the reactance of every switched line.
pub fn reduced_admittance(
    buses: &[BusRecord],
    lines: &[LineRecord],
    generators: &[GeneratorRecord],
    switched_on: bool,
) -> Result<CMatrix> {
    let nb = buses.len();
    let m = generators.len();
    let mut index = std::collections::HashMap::new();
    for (k, b) in buses.iter().enumerate() {
        if index.insert(b.id, k).is_some() {
            return Err(SchedError::Network(format!("duplicate bus id {}", b.id)));
        }
    }
    let lookup = |id: usize, what: String| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| SchedError::Network(format!("{what} refers to unknown bus {id}")))
    };
    let n = nb + m;
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for (k, b) in buses.iter().enumerate() {
        // constant-impedance load drawing P + jQ at unit voltage
        y[k][k] += Complex64::new(b.load_p, -b.load_q);
    }
    for (l, line) in lines.iter().enumerate() {
        let tag = format!("line {} ({}-{})", l + 1, line.from, line.to);
        let (i, j) = (
            lookup(line.from, tag.clone())?,
            lookup(line.to, tag.clone())?,
        );
        if i == j {
            return Err(SchedError::Network(format!(
                "{tag} connects a bus to itself"
            )));
        }
        let x = if switched_on && line.switched {
            2.0 * line.x
        } else {
            line.x
        };
        let z = Complex64::new(line.r, x);
        if z.norm() == 0.0 || !z.is_finite() {
            return Err(SchedError::Network(format!(
                "{tag} has zero or invalid impedance"
            )));
        }
        let ys = z.inv();
        let ysh = Complex64::new(0.0, 0.5 * line.b);
        y[i][i] += ys + ysh;
        y[j][j] += ys + ysh;
        y[i][j] -= ys;
        y[j][i] -= ys;
    }
    for (g, gen) in generators.iter().enumerate() {
        let tag = format!("generator {}", g + 1);
        let bus = gen
            .bus
            .ok_or_else(|| SchedError::Network(format!("{tag} has no bus")))?;
        let k = lookup(bus, tag.clone())?;
        let xd = gen
            .xd_transient
            .filter(|x| *x > 0.0)
            .ok_or_else(|| SchedError::Network(format!("{tag} needs a positive xd_transient")))?;
        let yg = Complex64::new(0.0, xd).inv();
        let e = nb + g;
        y[e][e] += yg;
        y[k][k] += yg;
        y[e][k] -= yg;
        y[k][e] -= yg;
    }
    kron_reduce(&y, nb, |k| buses[k].id)
}

/// Eliminates the first `nb` nodes of `y`. `label` names a node for errors.
pub fn kron_reduce(y: &CMatrix, nb: usize, label: impl Fn(usize) -> usize) -> Result<CMatrix> {
    let n = y.len();
    let m = n - nb;
    let scale = y
        .iter()
        .flatten()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
        .max(1.0);
    // Solve Y_BB X = Y_BI in place by Gaussian elimination with partial pivoting.
    let mut a: CMatrix = (0..nb).map(|i| y[i][..nb].to_vec()).collect();
    let mut rhs: CMatrix = (0..nb).map(|i| y[i][nb..].to_vec()).collect();
    let mut perm: Vec<usize> = (0..nb).collect();
    for col in 0..nb {
        let piv = (col..nb)
            .max_by(|&p, &q| a[p][col].norm().total_cmp(&a[q][col].norm()))
            .unwrap();
        if a[piv][col].norm() <= 1e-12 * scale {
            return Err(SchedError::Network(format!(
                "singular reduction: bus {} is not connected to any generator",
                label(perm[piv])
            )));
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        perm.swap(col, piv);
        let p = a[col][col];
        for r in col + 1..nb {
            let f = a[r][col] / p;
            if f.norm() == 0.0 {
                continue;
            }
            for c in col..nb {
                let v = a[col][c];
                a[r][c] -= f * v;
            }
            for c in 0..m {
                let v = rhs[col][c];
                rhs[r][c] -= f * v;
            }
        }
    }
    for col in (0..nb).rev() {
        for c in 0..m {
            let mut v = rhs[col][c];
            for k in col + 1..nb {
                v -= a[col][k] * rhs[k][c];
            }
            rhs[col][c] = v / a[col][col];
        }
    }
    let mut out = vec![vec![Complex64::new(0.0, 0.0); m]; m];
    for i in 0..m {
        for j in 0..m {
            let mut v = y[nb + i][nb + j];
            for k in 0..nb {
                v -= y[nb + i][k] * rhs[k][j];
            }
            out[i][j] = v;
        }
    }
    // restore exact symmetry lost to rounding
    for i in 0..m {
        for j in 0..i {
            let s = 0.5 * (out[i][j] + out[j][i]);
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    Ok(out)
}

/// Damped Newton solve of `P_m = P_e(δ)` in configuration 1 with the
/// first generator's angle pinned at zero. The first generator acts as
/// slack: its mechanical power is reset to the electrical power it
/// delivers at the solution.
pub fn solve_equilibrium(net: &mut PowerNetwork<f64>) -> Result<Vec<f64>> {
    let m = net.num_generators();
    let mut delta = vec![0.0; m];
    if m == 1 {
        let mut p = [0.0];
        net.electrical_power(0, &delta, &mut p)?;
        net.set_mech_power(0, p[0]);
        return Ok(delta);
    }
    let pm: Vec<f64> = net.machines().iter().map(|g| g.mech_power).collect();
    let residual = |d: &[f64]| -> Vec<f64> {
        let mut p = vec![0.0; m];
        net.electrical_power(0, d, &mut p).expect("length checked");
        (1..m).map(|i| pm[i] - p[i]).collect()
    };
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut r = residual(&delta);
    let mut iter = 0;
    while norm(&r) > EQUILIBRIUM_TOL {
        if iter == EQUILIBRIUM_MAX_ITER {
            return Err(SchedError::Network(format!(
                "equilibrium solve did not converge; residual {:.3e} after {iter} iterations, largest at generator {}",
                norm(&r),
                worst(&r) + 2
            )));
        }
        iter += 1;
        let mut jac = vec![0.0; m * m];
        net.power_jacobian(0, &delta, &mut jac);
        // d r / d δ_j = −∂P_e/∂δ_j on the free block
        let k = m - 1;
        let mut a: Vec<Vec<f64>> = (1..m)
            .map(|i| (1..m).map(|j| jac[i * m + j]).collect())
            .collect();
        let step = solve_real(&mut a, r.clone()).ok_or_else(|| {
            SchedError::Network(format!(
                "equilibrium Jacobian is singular at iteration {iter}"
            ))
        })?;
        let r0 = norm(&r);
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = (0..m)
                .map(|i| {
                    if i == 0 {
                        0.0
                    } else {
                        delta[i] + lambda * step[i - 1]
                    }
                })
                .collect();
            let rt = residual(&trial);
            if norm(&rt) < (1.0 - 1e-4 * lambda) * r0 || lambda < 1e-6 {
                delta = trial;
                r = rt;
                break;
            }
            lambda *= 0.5;
        }
        debug_assert_eq!(step.len(), k);
    }
    let mut p = vec![0.0; m];
    net.electrical_power(0, &delta, &mut p)?;
    let old = net.machines()[0].mech_power;
    if (old - p[0]).abs() > 1e-9 {
        log::info!(
            "slack generator 1: mechanical power adjusted from {old} to {}",
            p[0]
        );
    }
    net.set_mech_power(0, p[0]);
    Ok(delta)
}

fn worst(r: &[f64]) -> usize {
    (0..r.len())
        .max_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()))
        .unwrap_or(0)
}

fn solve_real(a: &mut [Vec<f64>], mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |s, v| s.max(v.abs()))
        .max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() <= 1e-14 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let s: f64 = (col + 1..n).map(|k| a[col][k] * b[k]).sum();
        b[col] = (b[col] - s) / a[col][col];
    }
    Some(b)
}

/// Seeded uniform perturbation in `[−magnitude, magnitude]` per generator.
pub fn make_disturbance(seed: u64, magnitude: f64, count: usize) -> Result<Vec<f64>> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(SchedError::InvalidArgument(format!(
            "disturbance magnitude must be non-negative, got {magnitude}"
        )));
    }
    if magnitude == 0.0 {
        return Ok(vec![0.0; count]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| rng.gen_range(-magnitude..=magnitude))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::SwitchedSystem;
    use approx::assert_abs_diff_eq;

    fn toy() -> NetworkFile {
        serde_json::from_str(
            r#"{
                "buses": [{"id": 1}, {"id": 2}],
                "lines": [{"from": 1, "to": 2, "X": 0.5, "switched": true}],
                "generators": [
                    {"bus": 1, "H": 3.0, "Pm": 0.0, "E": 1.0, "xd_transient": 0.25},
                    {"bus": 2, "H": 3.0, "Pm": 0.0, "E": 1.0, "xd_transient": 0.25}
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn toy_reduction_matches_series_reactance() {
        let f = toy();
        let buses = f.buses.as_ref().unwrap();
        let lines = f.lines.as_ref().unwrap();
        // series path 0.25 + 0.5 + 0.25 = 1.0 → Y_red = [[−j, j], [j, −j]]
        let y = reduced_admittance(buses, lines, &f.generators, false).unwrap();
        assert_abs_diff_eq!(y[0][0].im, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[0][1].im, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[0][1].re, 0.0, epsilon = 1e-12);
        assert_eq!(y[0][1], y[1][0]);
        // switched: 0.25 + 1.0 + 0.25 = 1.5
        let y = reduced_admittance(buses, lines, &f.generators, true).unwrap();
        assert_abs_diff_eq!(y[0][1].im, 1.0 / 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1][1].im, -1.0 / 1.5, epsilon = 1e-12);
    }

    #[test]
    fn doubling_reactance_halves_branch_admittance() {
        let y1 = Complex64::new(0.0, 0.4).inv();
        let y2 = Complex64::new(0.0, 0.8).inv();
        assert_abs_diff_eq!(y2.norm(), 0.5 * y1.norm(), epsilon = 1e-15);
    }

    #[test]
    fn equilibrium_has_zero_acceleration() {
        let mut f = toy();
        f.generators[0].pm = 0.2;
        f.generators[1].pm = -0.2;
        let net = build_network(&f).unwrap();
        let d = net.equilibrium();
        assert_eq!(d[0], 0.0);
        assert_abs_diff_eq!((d[0] - d[1]).sin(), 0.2, epsilon = 1e-10);
        let x = net.initial_state(&[0.0, 0.0]).unwrap();
        let mut out = [0.0; 4];
        net.mode_field(0, &x, &mut out);
        assert!(out[2].abs() < 1e-8 && out[3].abs() < 1e-8);
    }

    #[test]
    fn slack_absorbs_imbalance() {
        let mut f = toy();
        f.generators[0].pm = 0.5;
        f.generators[1].pm = -0.2;
        let net = build_network(&f).unwrap();
        assert_abs_diff_eq!(net.machines()[0].mech_power, 0.2, epsilon = 1e-10);
    }

    #[test]
    fn infeasible_equilibrium_is_reported() {
        let mut f = toy();
        f.generators[1].pm = -1.5;
        let err = build_network(&f).unwrap_err();
        assert!(matches!(err, SchedError::Network(_)), "{err}");
    }

    #[test]
    fn malformed_files_name_the_element() {
        let mut f = toy();
        f.lines.as_mut().unwrap()[0].to = 7;
        let msg = build_network(&f).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains('7'), "{msg}");

        let mut f = toy();
        f.buses.as_mut().unwrap().push(BusRecord {
            id: 3,
            load_p: 0.0,
            load_q: 0.0,
        });
        let msg = build_network(&f).unwrap_err().to_string();
        assert!(msg.contains("singular") && msg.contains('3'), "{msg}");

        let mut f = toy();
        f.generators[1].xd_transient = None;
        assert!(build_network(&f)
            .unwrap_err()
            .to_string()
            .contains("generator 2"));
    }

    #[test]
    fn direct_form_round_trip() {
        let f: NetworkFile = serde_json::from_str(
            r#"{"Y1": [[[0, -2], [0, 2]], [[0, 2], [0, -2]]],
                "Y2": [[[0, -4], [0, 4]], [[0, 4], [0, -4]]],
                "generators": [{"H": 2, "Pm": 0, "E": 1}, {"H": 2, "Pm": 0, "E": 1}]}"#,
        )
        .unwrap();
        let net = build_network(&f).unwrap();
        assert_eq!(net.admittance(1, 0, 1), (0.0, 4.0));
        assert_eq!(net.equilibrium(), &[0.0, 0.0]);
    }

    #[test]
    fn disturbance_is_seeded_and_bounded() {
        assert_eq!(make_disturbance(3, 0.0, 4).unwrap(), vec![0.0; 4]);
        let a = make_disturbance(11, 0.3, 50).unwrap();
        assert_eq!(a, make_disturbance(11, 0.3, 50).unwrap());
        assert_ne!(a, make_disturbance(12, 0.3, 50).unwrap());
        assert!(a.iter().all(|v| v.abs() <= 0.3));
        assert!(make_disturbance(1, -0.1, 2).is_err());
    }
}
