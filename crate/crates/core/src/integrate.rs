//! Forward state and backward adjoint integration of a switched system.
//!
//! Each schedule interval is integrated separately with an adaptive
//! 8th-order Dormand–Prince pair, restarting exactly at the switching times.
//! Accepted steps are stored as `(t, value, derivative)` knots and the curve
//! is evaluated between knots by cubic Hermite interpolation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SchedError};
use crate::scalar::{all_finite, Real};
use crate::signals::ModeSchedule;

/// A family of autonomous vector fields `f_1..f_N` on `ℝⁿ` sharing one
/// running cost `ℓ`. Implementations must be pure.
pub trait SwitchedSystem<S: Real>: Sync {
    fn num_modes(&self) -> usize;

    fn num_states(&self) -> usize;

    /// Writes `f_mode(x)` into `out`.
    fn mode_field(&self, mode: usize, x: &[S], out: &mut [S]);

    /// Writes `Df_mode(x)` into `out` as a row-major `n × n` matrix.
    fn mode_jacobian(&self, mode: usize, x: &[S], out: &mut [S]);

    fn running_cost(&self, x: &[S]) -> S;

    /// Writes `Dℓ(x)` into `out`.
    fn running_cost_gradient(&self, x: &[S], out: &mut [S]);
}

/// Step-size control settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions<S> {
    pub atol: S,
    pub rtol: S,
    /// Largest step; `None` means `horizon / 1024`. Bounding the step keeps
    /// the Hermite interpolant between knots accurate.
    pub max_step: Option<S>,
    /// Step budget per interval.
    pub max_steps: usize,
}

impl<S: Real> Default for IntegratorOptions<S> {
    fn default() -> Self {
        let floor = S::lit(100.0) * S::epsilon();
        Self {
            atol: S::lit(1e-9).max(floor),
            rtol: S::lit(1e-8).max(floor),
            max_step: None,
            max_steps: 1_000_000,
        }
    }
}

impl<S: Real> IntegratorOptions<S> {
    pub fn with_tolerance(atol: S, rtol: S) -> Self {
        Self {
            atol,
            rtol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.atol > S::zero()) || !(self.rtol > S::zero()) {
            return Err(SchedError::InvalidArgument(format!(
                "tolerances must be positive (atol = {}, rtol = {})",
                self.atol, self.rtol
            )));
        }
        if let Some(h) = self.max_step {
            if !(h > S::zero()) {
                return Err(SchedError::InvalidArgument(format!(
                    "max_step must be positive, got {h}"
                )));
            }
        }
        Ok(())
    }

    fn step_cap(&self, horizon: S) -> S {
        self.max_step.unwrap_or(horizon / S::lit(1024.0))
    }
}

/// Knots of one schedule interval, in increasing time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSegment<S> {
    pub times: Vec<S>,
    /// Row-major `times.len() × dim`.
    pub values: Vec<S>,
    /// Row-major `times.len() × dim`.
    pub rates: Vec<S>,
}

impl<S: Real> CurveSegment<S> {
    fn new() -> Self {
        Self {
            times: Vec::new(),
            values: Vec::new(),
            rates: Vec::new(),
        }
    }

    fn push(&mut self, t: S, y: &[S], dy: &[S]) {
        self.times.push(t);
        self.values.extend_from_slice(y);
        self.rates.extend_from_slice(dy);
    }

    fn reverse(&mut self, dim: usize) {
        self.times.reverse();
        reverse_rows(&mut self.values, dim);
        reverse_rows(&mut self.rates, dim);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> S {
        self.times[0]
    }

    pub fn end(&self) -> S {
        *self.times.last().expect("segment has knots")
    }

    pub fn knot_value(&self, k: usize, dim: usize) -> &[S] {
        &self.values[k * dim..(k + 1) * dim]
    }

    pub fn knot_rate(&self, k: usize, dim: usize) -> &[S] {
        &self.rates[k * dim..(k + 1) * dim]
    }

    fn locate(&self, t: S) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.saturating_sub(1).min(self.times.len().saturating_sub(2))
    }

    fn hermite(&self, t: S, dim: usize, value: Option<&mut [S]>, rate: Option<&mut [S]>) {
        if self.times.len() == 1 {
            if let Some(v) = value {
                v.copy_from_slice(self.knot_value(0, dim));
            }
            if let Some(r) = rate {
                r.copy_from_slice(self.knot_rate(0, dim));
            }
            return;
        }
        let k = self.locate(t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).max(S::zero()).min(S::one());
        let (y0, y1) = (self.knot_value(k, dim), self.knot_value(k + 1, dim));
        let (m0, m1) = (self.knot_rate(k, dim), self.knot_rate(k + 1, dim));
        let two = S::lit(2.0);
        let three = S::lit(3.0);
        let s2 = s * s;
        let s3 = s2 * s;
        if let Some(v) = value {
            let h00 = two * s3 - three * s2 + S::one();
            let h10 = s3 - two * s2 + s;
            let h01 = three * s2 - two * s3;
            let h11 = s3 - s2;
            for i in 0..dim {
                v[i] = h00 * y0[i] + h10 * h * m0[i] + h01 * y1[i] + h11 * h * m1[i];
            }
        }
        if let Some(r) = rate {
            let six = S::lit(6.0);
            let g00 = (six * s2 - six * s) / h;
            let g10 = three * s2 - S::lit(4.0) * s + S::one();
            let g01 = (six * s - six * s2) / h;
            let g11 = three * s2 - two * s;
            for i in 0..dim {
                r[i] = g00 * y0[i] + g10 * m0[i] + g01 * y1[i] + g11 * m1[i];
            }
        }
    }
}

fn reverse_rows<S: Copy>(data: &mut [S], dim: usize) {
    let rows = data.len() / dim.max(1);
    for r in 0..rows / 2 {
        for i in 0..dim {
            data.swap(r * dim + i, (rows - 1 - r) * dim + i);
        }
    }
}

/// Piecewise dense-output curve over `[0, horizon]`, one segment per
/// schedule interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledCurve<S> {
    dim: usize,
    boundaries: Vec<S>,
    segments: Vec<CurveSegment<S>>,
    integral: Option<S>,
}

impl<S: Real> SampledCurve<S> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> S {
        *self.boundaries.last().expect("curve has boundaries")
    }

    /// `[0, T_1, ..., horizon]`.
    pub fn boundaries(&self) -> &[S] {
        &self.boundaries
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, i: usize) -> &CurveSegment<S> {
        &self.segments[i]
    }

    pub fn num_knots(&self) -> usize {
        self.segments.iter().map(CurveSegment::len).sum()
    }

    /// Running-cost integral carried by the forward integration, if any.
    pub fn integral(&self) -> Option<S> {
        self.integral
    }

    /// Segment containing `t` under the half-open convention.
    pub fn segment_index(&self, t: S) -> usize {
        let inner = &self.boundaries[1..self.boundaries.len() - 1];
        inner.partition_point(|&s| s <= t)
    }

    /// Evaluates segment `seg` at `t`, extrapolating the segment's end
    /// interpolant if `t` lies outside it. Used for one-sided limits.
    pub fn value_in(&self, seg: usize, t: S, out: &mut [S]) {
        self.segments[seg].hermite(t, self.dim, Some(out), None);
    }

    pub fn rate_in(&self, seg: usize, t: S, out: &mut [S]) {
        self.segments[seg].hermite(t, self.dim, None, Some(out));
    }

    pub fn value_into(&self, t: S, out: &mut [S]) {
        self.value_in(self.segment_index(t), t, out);
    }

    pub fn value(&self, t: S) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim];
        self.value_into(t, &mut out);
        out
    }

    /// Interpolated derivative (right limit at switching times).
    pub fn rate(&self, t: S) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim];
        self.rate_in(self.segment_index(t), t, &mut out);
        out
    }

    /// Left limit at `t`; equals [`Self::value`] away from switching times.
    pub fn left_value(&self, t: S) -> Vec<S> {
        let mut seg = self.segment_index(t);
        if seg > 0 && t == self.boundaries[seg] {
            seg -= 1;
        }
        let mut out = vec![S::zero(); self.dim];
        self.value_in(seg, t, &mut out);
        out
    }

    pub fn initial_value(&self) -> &[S] {
        self.segments[0].knot_value(0, self.dim)
    }

    pub fn final_value(&self) -> &[S] {
        let last = self.segments.last().expect("curve has segments");
        last.knot_value(last.len() - 1, self.dim)
    }

    /// `n + 1` uniformly spaced samples over `[0, horizon]`.
    pub fn sample_uniform(&self, n: usize) -> Vec<(S, Vec<S>)> {
        let n = n.max(1);
        let step = self.horizon() / S::from_count(n);
        (0..=n)
            .map(|k| {
                let t = if k == n {
                    self.horizon()
                } else {
                    step * S::from_count(k)
                };
                (t, self.value(t))
            })
            .collect()
    }

    /// CSV with header `t,<names...>` on a uniform grid of `n + 1` points.
    pub fn to_csv(&self, n: usize, names: &[&str]) -> String {
        let times: Vec<S> = self.sample_uniform(n).into_iter().map(|(t, _)| t).collect();
        self.to_csv_at(&times, names)
    }

    /// CSV with header `t,<names...>` at the given times, each clamped to
    /// `[0, horizon]` for evaluation. Unnamed columns are `x1, x2, …`.
    pub fn to_csv_at(&self, times: &[S], names: &[&str]) -> String {
        let mut out = String::from("t");
        for i in 0..self.dim {
            match names.get(i) {
                Some(name) => {
                    let _ = write!(out, ",{name}");
                }
                None => {
                    let _ = write!(out, ",x{}", i + 1);
                }
            }
        }
        out.push('\n');
        let mut v = vec![S::zero(); self.dim];
        for &t in times {
            self.value_into(t.max(S::zero()).min(self.horizon()), &mut v);
            let _ = write!(out, "{t}");
            for x in &v {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    /// All knots as JSON, for debugging.
    pub fn knots_json(&self) -> String {
        serde_json::to_string(self).expect("curve serializes")
    }

    /// Appends `other`, shifting its time axis by this curve's horizon.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(SchedError::Mismatch(format!(
                "cannot join curves of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let offset = self.horizon();
        let mut boundaries = self.boundaries.clone();
        boundaries.extend(other.boundaries.iter().skip(1).map(|&b| b + offset));
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().map(|s| CurveSegment {
            times: s.times.iter().map(|&t| t + offset).collect(),
            values: s.values.clone(),
            rates: s.rates.clone(),
        }));
        let integral = match (self.integral, other.integral) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        Ok(Self {
            dim: self.dim,
            boundaries,
            segments,
            integral,
        })
    }
}

struct Tableau<S> {
    c: [S; 12],
    a: [[S; 11]; 12],
    b: [S; 12],
    bhh: [S; 3],
    er: [S; 12],
}

impl<S: Real> Tableau<S> {
    fn dop853() -> Self {
        let l = S::lit;
        let z = S::zero();
        let mut a = [[z; 11]; 12];
        let rows: [&[(usize, f64)]; 12] = [
            &[],
            &[(0, 5.26001519587677318785587544488E-2)],
            &[
                (0, 1.97250569845378994544595329183E-2),
                (1, 5.91751709536136983633785987549E-2),
            ],
            &[
                (0, 2.95875854768068491816892993775E-2),
                (2, 8.87627564304205475450678981324E-2),
            ],
            &[
                (0, 2.41365134159266685502369798665E-1),
                (2, -8.84549479328286085344864962717E-1),
                (3, 9.24834003261792003115737966543E-1),
            ],
            &[
                (0, 3.7037037037037037037037037037E-2),
                (3, 1.70828608729473871279604482173E-1),
                (4, 1.25467687566822425016691814123E-1),
            ],
            &[
                (0, 3.7109375E-2),
                (3, 1.70252211019544039314978060272E-1),
                (4, 6.02165389804559606850219397283E-2),
                (5, -1.7578125E-2),
            ],
            &[
                (0, 3.70920001185047927108779319836E-2),
                (3, 1.70383925712239993810214054705E-1),
                (4, 1.07262030446373284651809199168E-1),
                (5, -1.53194377486244017527936158236E-2),
                (6, 8.27378916381402288758473766002E-3),
            ],
            &[
                (0, 6.24110958716075717114429577812E-1),
                (3, -3.36089262944694129406857109825E0),
                (4, -8.68219346841726006818189891453E-1),
                (5, 2.75920996994467083049415600797E1),
                (6, 2.01540675504778934086186788979E1),
                (7, -4.34898841810699588477366255144E1),
            ],
            &[
                (0, 4.77662536438264365890433908527E-1),
                (3, -2.48811461997166764192642586468E0),
                (4, -5.90290826836842996371446475743E-1),
                (5, 2.12300514481811942347288949897E1),
                (6, 1.52792336328824235832596922938E1),
                (7, -3.32882109689848629194453265587E1),
                (8, -2.03312017085086261358222928593E-2),
            ],
            &[
                (0, -9.3714243008598732571704021658E-1),
                (3, 5.18637242884406370830023853209E0),
                (4, 1.09143734899672957818500254654E0),
                (5, -8.14978701074692612513997267357E0),
                (6, -1.85200656599969598641566180701E1),
                (7, 2.27394870993505042818970056734E1),
                (8, 2.49360555267965238987089396762E0),
                (9, -3.0467644718982195003823669022E0),
            ],
            &[
                (0, 2.27331014751653820792359768449E0),
                (3, -1.05344954667372501984066689879E1),
                (4, -2.00087205822486249909675718444E0),
                (5, -1.79589318631187989172765950534E1),
                (6, 2.79488845294199600508499808837E1),
                (7, -2.85899827713502369474065508674E0),
                (8, -8.87285693353062954433549289258E0),
                (9, 1.23605671757943030647266201528E1),
                (10, 6.43392746015763530355970484046E-1),
            ],
        ];
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row.iter() {
                a[i][j] = l(v);
            }
        }
        let c = [
            0.0,
            0.526001519587677318785587544488E-01,
            0.789002279381515978178381316732E-01,
            0.118350341907227396726757197510E+00,
            0.281649658092772603273242802490E+00,
            0.333333333333333333333333333333E+00,
            0.25E+00,
            0.307692307692307692307692307692E+00,
            0.651282051282051282051282051282E+00,
            0.6E+00,
            0.857142857142857142857142857142E+00,
            1.0,
        ]
        .map(l);
        let b = [
            5.42937341165687622380535766363E-2,
            0.0,
            0.0,
            0.0,
            0.0,
            4.45031289275240888144113950566E0,
            1.89151789931450038304281599044E0,
            -5.8012039600105847814672114227E0,
            3.1116436695781989440891606237E-1,
            -1.52160949662516078556178806805E-1,
            2.01365400804030348374776537501E-1,
            4.47106157277725905176885569043E-2,
        ]
        .map(l);
        let er = [
            0.1312004499419488073250102996E-01,
            0.0,
            0.0,
            0.0,
            0.0,
            -0.1225156446376204440720569753E+01,
            -0.4957589496572501915214079952E+00,
            0.1664377182454986536961530415E+01,
            -0.3503288487499736816886487290E+00,
            0.3341791187130174790297318841E+00,
            0.8192320648511571246570742613E-01,
            -0.2235530786388629525884427845E-01,
        ]
        .map(l);
        let bhh = [
            0.244094488188976377952755905512E+00,
            0.733846688281611857341361741547E+00,
            0.220588235294117647058823529412E-01,
        ]
        .map(l);
        Self { c, a, b, bhh, er }
    }
}

type Rhs<'a, S> = dyn FnMut(S, &[S], &mut [S]) + 'a;
type Emit<'a, S> = dyn FnMut(S, &[S], &[S]) + 'a;

/// Adaptive DOP853 integration of `y' = rhs(t, y)` from `t0` to `t1`
/// (either direction). `emit` receives the initial point and every accepted
/// step end as `(t, y, y')`. Returns the last proposed step magnitude.
#[allow(clippy::too_many_arguments)]
fn dop853<S: Real>(
    rhs: &mut Rhs<S>,
    t0: S,
    y0: &[S],
    t1: S,
    opts: &IntegratorOptions<S>,
    h_cap: S,
    h_guess: Option<S>,
    emit: &mut Emit<S>,
) -> std::result::Result<S, (S, String)> {
    let n = y0.len();
    let tab = Tableau::<S>::dop853();
    let dir = if t1 >= t0 { S::one() } else { -S::one() };
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<S>> = vec![vec![S::zero(); n]; 12];
    rhs(t, &y, &mut k[0]);
    if !all_finite(&y) || !all_finite(&k[0]) {
        return Err((t, "non-finite initial state or derivative".into()));
    }
    emit(t, &y, &k[0]);
    if span == S::zero() {
        return Ok(h_cap);
    }
    let h_max = h_cap.min(span);
    let scale = |y: &[S], i: usize, other: S| opts.atol + opts.rtol * y[i].abs().max(other.abs());

    let mut h = match h_guess {
        Some(g) => g.abs().min(h_max),
        None => initial_step(rhs, t, &y, &k[0], dir, opts, h_max),
    };
    let mut ystage = vec![S::zero(); n];
    let mut ynew = vec![S::zero(); n];
    let mut fnew = vec![S::zero(); n];
    let mut steps = 0usize;
    let mut last_rejected = false;
    let tiny = S::lit(10.0) * S::epsilon() * (t0.abs().max(t1.abs()).max(S::one()));
    let safe = S::lit(0.9);
    let facc1 = S::lit(1.0 / 0.333);
    let facc2 = S::lit(1.0 / 6.0);
    let expo = S::lit(1.0 / 8.0);

    loop {
        let remaining = (t1 - t).abs();
        if remaining <= tiny {
            break;
        }
        if steps >= opts.max_steps {
            return Err((t, format!("step budget of {} exhausted", opts.max_steps)));
        }
        if h < tiny {
            return Err((t, format!("step size underflow (h = {h})")));
        }
        let mut last = false;
        if h * S::lit(1.01) >= remaining {
            h = remaining;
            last = true;
        }
        let hs = h * dir;
        for s in 1..12 {
            for i in 0..n {
                let mut acc = S::zero();
                for j in 0..s {
                    let a = tab.a[s][j];
                    if a != S::zero() {
                        acc += a * k[j][i];
                    }
                }
                ystage[i] = y[i] + hs * acc;
            }
            rhs(t + tab.c[s] * hs, &ystage, &mut k[s]);
        }
        let mut err = S::zero();
        let mut err2 = S::zero();
        for i in 0..n {
            let mut bsum = S::zero();
            let mut esum = S::zero();
            for s in 0..12 {
                bsum += tab.b[s] * k[s][i];
                esum += tab.er[s] * k[s][i];
            }
            ynew[i] = y[i] + hs * bsum;
            let sk = scale(&y, i, ynew[i]);
            let e2 = bsum - tab.bhh[0] * k[0][i] - tab.bhh[1] * k[8][i] - tab.bhh[2] * k[11][i];
            err2 += (e2 / sk).powi(2);
            err += (esum / sk).powi(2);
        }
        let mut deno = err + S::lit(0.01) * err2;
        if deno <= S::zero() {
            deno = S::one();
        }
        let err = h * err * (S::one() / (deno * S::from_count(n))).sqrt();
        steps += 1;
        if !err.is_finite() || !all_finite(&ynew) {
            h *= S::lit(0.1);
            last_rejected = true;
            continue;
        }
        let fac11 = err.powf(expo);
        let fac = facc2.max(facc1.min(fac11 / safe));
        let mut h_new = h / fac;
        if err <= S::one() {
            let t_new = if last { t1 } else { t + hs };
            rhs(t_new, &ynew, &mut fnew);
            if !all_finite(&fnew) {
                return Err((t_new, "non-finite derivative".into()));
            }
            t = t_new;
            y.copy_from_slice(&ynew);
            k[0].copy_from_slice(&fnew);
            emit(t, &y, &k[0]);
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            if last {
                return Ok(h_new.min(h_max));
            }
        } else {
            h_new = h / facc1.min(fac11 / safe);
            last_rejected = true;
        }
        h = h_new.min(h_max);
    }
    Ok(h.min(h_max))
}

fn initial_step<S: Real>(
    rhs: &mut Rhs<S>,
    t: S,
    y: &[S],
    f0: &[S],
    dir: S,
    opts: &IntegratorOptions<S>,
    h_max: S,
) -> S {
    let n = y.len();
    let sk: Vec<S> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let norm = |v: &[S]| {
        (v.iter().zip(&sk).map(|(a, s)| (*a / *s).powi(2)).sum::<S>() / S::from_count(n)).sqrt()
    };
    let d0 = norm(y);
    let d1 = norm(f0);
    let mut h0 = if d0 < S::lit(1e-10) || d1 < S::lit(1e-10) {
        S::lit(1e-6)
    } else {
        S::lit(0.01) * d0 / d1
    };
    h0 = h0.min(h_max);
    let y1: Vec<S> = y.iter().zip(f0).map(|(a, b)| *a + dir * h0 * *b).collect();
    let mut f1 = vec![S::zero(); n];
    rhs(t + dir * h0, &y1, &mut f1);
    let diff: Vec<S> = f1.iter().zip(f0).map(|(a, b)| *a - *b).collect();
    let d2 = norm(&diff) / h0;
    let big = d1.abs().max(d2.abs());
    let h1 = if !big.is_finite() || big <= S::lit(1e-15) {
        (S::lit(1e-6)).max(h0 * S::lit(1e-3))
    } else {
        (S::lit(0.01) / big).powf(S::lit(1.0 / 8.0))
    };
    (S::lit(100.0) * h0).min(h1).min(h_max)
}

fn check_inputs<S: Real>(sys: &dyn SwitchedSystem<S>, sched: &ModeSchedule<S>) -> Result<()> {
    if sched.num_modes() != sys.num_modes() {
        return Err(SchedError::Mismatch(format!(
            "schedule has {} modes but the system has {}",
            sched.num_modes(),
            sys.num_modes()
        )));
    }
    Ok(())
}

/// Integrates `ẋ = f_σ(t)(x)` from `x(0) = x0` across the schedule. The
/// running cost rides along as an extra accumulator state and is available
/// through [`SampledCurve::integral`].
pub fn integrate_state<S: Real>(
    sys: &dyn SwitchedSystem<S>,
    sched: &ModeSchedule<S>,
    x0: &[S],
    opts: &IntegratorOptions<S>,
) -> Result<SampledCurve<S>> {
    check_inputs(sys, sched)?;
    opts.validate()?;
    let n = sys.num_states();
    if x0.len() != n {
        return Err(SchedError::InvalidArgument(format!(
            "initial state has length {} but the system has {n} states",
            x0.len()
        )));
    }
    if !all_finite(x0) {
        return Err(SchedError::InvalidArgument(
            "initial state is not finite".into(),
        ));
    }
    let h_cap = opts.step_cap(sched.horizon());
    let mut y = x0.to_vec();
    y.push(S::zero());
    let mut segments = Vec::with_capacity(sched.len());
    let mut h_guess = None;
    for (start, end, mode) in sched.intervals() {
        let mut seg = CurveSegment::new();
        let mut rhs = |_t: S, y: &[S], dy: &mut [S]| {
            sys.mode_field(mode, &y[..n], &mut dy[..n]);
            dy[n] = sys.running_cost(&y[..n]);
        };
        let mut last = y.clone();
        let mut emit = |t: S, y: &[S], dy: &[S]| {
            seg.push(t, &y[..n], &dy[..n]);
            last.copy_from_slice(y);
        };
        let h = dop853(&mut rhs, start, &y, end, opts, h_cap, h_guess, &mut emit).map_err(
            |(time, reason)| SchedError::Integration {
                time: time.as_f64(),
                mode: mode + 1,
                reason,
            },
        )?;
        h_guess = Some(h);
        y = last;
        segments.push(seg);
    }
    Ok(SampledCurve {
        dim: n,
        boundaries: sched.boundaries(),
        segments,
        integral: Some(y[n]),
    })
}

fn check_curve<S: Real>(
    curve: &SampledCurve<S>,
    sched: &ModeSchedule<S>,
    dim: usize,
    what: &str,
) -> Result<()> {
    if curve.dim != dim {
        return Err(SchedError::Mismatch(format!(
            "{what} has dimension {} instead of {dim}",
            curve.dim
        )));
    }
    if curve.boundaries != sched.boundaries() {
        return Err(SchedError::Mismatch(format!(
            "{what} segment boundaries do not match the schedule"
        )));
    }
    Ok(())
}

/// Integrates `ρ̇ = −Df_σ(x)ᵀρ − Dℓ(x)ᵀ` backward from `ρ(T) = 0`. Steps
/// never straddle the knots of `x`, so the interpolated state seen by the
/// adjoint is a single cubic on every step.
pub fn integrate_adjoint<S: Real>(
    sys: &dyn SwitchedSystem<S>,
    sched: &ModeSchedule<S>,
    x: &SampledCurve<S>,
    opts: &IntegratorOptions<S>,
) -> Result<SampledCurve<S>> {
    check_inputs(sys, sched)?;
    opts.validate()?;
    let n = sys.num_states();
    check_curve(x, sched, n, "state curve")?;
    let h_cap = opts.step_cap(sched.horizon());
    let mut rho = vec![S::zero(); n];
    let mut segments: Vec<CurveSegment<S>> = Vec::with_capacity(sched.len());
    let mut jac = vec![S::zero(); n * n];
    let mut grad = vec![S::zero(); n];
    let mut xs = vec![S::zero(); n];
    for seg_idx in (0..sched.len()).rev() {
        let mode = sched.sequence()[seg_idx];
        let xseg = x.segment(seg_idx);
        let mut seg = CurveSegment::new();
        let mut h_guess = None;
        for k in (0..xseg.len() - 1).rev() {
            let (ta, tb) = (xseg.times[k], xseg.times[k + 1]);
            let mut rhs = |t: S, r: &[S], dr: &mut [S]| {
                xseg.hermite(t, n, Some(&mut xs), None);
                adjoint_rhs(sys, mode, &xs, r, dr, &mut jac, &mut grad);
            };
            let first = k + 2 == xseg.len();
            let mut emit = |t: S, r: &[S], dr: &[S]| {
                if first || t != tb {
                    seg.push(t, r, dr);
                }
            };
            let h = dop853(&mut rhs, tb, &rho, ta, opts, h_cap, h_guess, &mut emit).map_err(
                |(time, reason)| SchedError::Integration {
                    time: time.as_f64(),
                    mode: mode + 1,
                    reason,
                },
            )?;
            h_guess = Some(h);
            rho.copy_from_slice(seg.knot_value(seg.len() - 1, n));
        }
        seg.reverse(n);
        segments.push(seg);
    }
    segments.reverse();
    Ok(SampledCurve {
        dim: n,
        boundaries: sched.boundaries(),
        segments,
        integral: None,
    })
}

/// `−Df_mode(x)ᵀρ − Dℓ(x)ᵀ`.
pub(crate) fn adjoint_rhs<S: Real>(
    sys: &dyn SwitchedSystem<S>,
    mode: usize,
    x: &[S],
    rho: &[S],
    out: &mut [S],
    jac: &mut [S],
    grad: &mut [S],
) {
    let n = x.len();
    sys.mode_jacobian(mode, x, jac);
    sys.running_cost_gradient(x, grad);
    for j in 0..n {
        let mut acc = grad[j];
        for i in 0..n {
            acc += jac[i * n + j] * rho[i];
        }
        out[j] = -acc;
    }
}

/// `J = ∫₀ᵀ ℓ(x(t)) dt`. Uses the accumulator carried by the forward
/// integration when present, otherwise 5-point Gauss–Legendre quadrature on
/// every knot interval.
pub fn evaluate_cost<S: Real>(sys: &dyn SwitchedSystem<S>, x: &SampledCurve<S>) -> S {
    if let Some(j) = x.integral {
        return j;
    }
    let nodes = [
        (0.0, 0.568_888_888_888_888_9),
        (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
        (0.906_179_845_938_664, 0.236_926_885_056_189_08),
    ];
    let half = S::lit(0.5);
    let mut buf = vec![S::zero(); x.dim];
    let mut total = S::zero();
    for seg in &x.segments {
        for w in seg.times.windows(2) {
            let mid = (w[0] + w[1]) * half;
            let rad = (w[1] - w[0]) * half;
            for &(node, weight) in &nodes {
                seg.hermite(mid + rad * S::lit(node), x.dim, Some(&mut buf), None);
                total += rad * S::lit(weight) * sys.running_cost(&buf);
            }
        }
    }
    total
}

/// Largest entrywise gap between `mode_jacobian` and a central finite
/// difference of `mode_field` with the given step, scaled by
/// `1 + max|Df|`.
pub fn jacobian_fd_error<S: Real>(sys: &dyn SwitchedSystem<S>, mode: usize, x: &[S], step: S) -> S {
    let n = x.len();
    let mut jac = vec![S::zero(); n * n];
    sys.mode_jacobian(mode, x, &mut jac);
    let mut xp = x.to_vec();
    let mut fp = vec![S::zero(); n];
    let mut fm = vec![S::zero(); n];
    let mut worst = S::zero();
    for j in 0..n {
        xp[j] = x[j] + step;
        sys.mode_field(mode, &xp, &mut fp);
        xp[j] = x[j] - step;
        sys.mode_field(mode, &xp, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            let fd = (fp[i] - fm[i]) / (step + step);
            worst = worst.max((fd - jac[i * n + j]).abs());
        }
    }
    let size = jac.iter().fold(S::zero(), |m, v| m.max(v.abs()));
    worst / (S::one() + size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// `ẋ = a_mode · x` with running cost `ℓ(x) = c·x + q·x²`.
    struct Scalar {
        rates: Vec<f64>,
        lin: f64,
        quad: f64,
    }

    impl SwitchedSystem<f64> for Scalar {
        fn num_modes(&self) -> usize {
            self.rates.len()
        }
        fn num_states(&self) -> usize {
            1
        }
        fn mode_field(&self, mode: usize, x: &[f64], out: &mut [f64]) {
            out[0] = self.rates[mode] * x[0];
        }
        fn mode_jacobian(&self, mode: usize, _x: &[f64], out: &mut [f64]) {
            out[0] = self.rates[mode];
        }
        fn running_cost(&self, x: &[f64]) -> f64 {
            self.lin * x[0] + self.quad * x[0] * x[0]
        }
        fn running_cost_gradient(&self, x: &[f64], out: &mut [f64]) {
            out[0] = self.lin + 2.0 * self.quad * x[0];
        }
    }

    /// Harmonic oscillator; mode 1 runs it backwards in angle.
    struct Oscillator;

    impl SwitchedSystem<f64> for Oscillator {
        fn num_modes(&self) -> usize {
            2
        }
        fn num_states(&self) -> usize {
            2
        }
        fn mode_field(&self, mode: usize, x: &[f64], out: &mut [f64]) {
            let s = if mode == 0 { 1.0 } else { -1.0 };
            out[0] = s * x[1];
            out[1] = -s * x[0];
        }
        fn mode_jacobian(&self, mode: usize, _x: &[f64], out: &mut [f64]) {
            let s = if mode == 0 { 1.0 } else { -1.0 };
            out.copy_from_slice(&[0.0, s, -s, 0.0]);
        }
        fn running_cost(&self, x: &[f64]) -> f64 {
            0.5 * (x[0] * x[0] + x[1] * x[1])
        }
        fn running_cost_gradient(&self, x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(x);
        }
    }

    fn tight() -> IntegratorOptions<f64> {
        IntegratorOptions::with_tolerance(1e-12, 1e-12)
    }

    #[test]
    fn exponential_decay() {
        let sys = Scalar {
            rates: vec![-1.0],
            lin: 0.0,
            quad: 0.0,
        };
        let sched = ModeSchedule::constant(0, 1.0, 1).unwrap();
        let x = integrate_state(&sys, &sched, &[1.0], &IntegratorOptions::default()).unwrap();
        assert_abs_diff_eq!(x.final_value()[0], (-1.0f64).exp(), epsilon = 1e-8);
        assert_abs_diff_eq!(x.value(0.37)[0], (-0.37f64).exp(), epsilon = 1e-8);
        assert_abs_diff_eq!(x.rate(0.37)[0], -(-0.37f64).exp(), epsilon = 1e-7);
    }

    #[test]
    fn semigroup_across_switch() {
        let sys = Scalar {
            rates: vec![-1.0, 0.5],
            lin: 0.0,
            quad: 1.0,
        };
        let sched = ModeSchedule::new(vec![0, 1], vec![0.4], 1.0, 2).unwrap();
        let x = integrate_state(&sys, &sched, &[2.0], &tight()).unwrap();
        let xa = 2.0 * (-0.4f64).exp();
        let xb = xa * (0.5f64 * 0.6).exp();
        assert_abs_diff_eq!(x.value(0.4)[0], xa, epsilon = 1e-10);
        assert_abs_diff_eq!(x.left_value(0.4)[0], xa, epsilon = 1e-10);
        assert_abs_diff_eq!(x.final_value()[0], xb, epsilon = 1e-10);
        // state continuity: both segments share the boundary sample
        let left = x.segment(0).knot_value(x.segment(0).len() - 1, 1)[0];
        let right = x.segment(1).knot_value(0, 1)[0];
        assert_eq!(left, right);
        // ∫ x² = 4(1 − e^{-0.8})/2 + xa²(e^{0.6} − 1)
        let exact = 2.0 * (1.0 - (-0.8f64).exp()) + xa * xa * ((0.6f64).exp() - 1.0);
        assert_abs_diff_eq!(evaluate_cost(&sys, &x), exact, epsilon = 1e-10);
    }

    #[test]
    fn constant_cost_integrates_to_horizon() {
        let sys = Scalar {
            rates: vec![0.0],
            lin: 0.0,
            quad: 1.0,
        };
        let sched = ModeSchedule::constant(0, 1.0, 1).unwrap();
        let x = integrate_state(&sys, &sched, &[2.0], &tight()).unwrap();
        assert_abs_diff_eq!(evaluate_cost(&sys, &x), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn adjoint_closed_form() {
        // ẋ = −x, ℓ = x ⇒ ρ̇ = ρ − 1, ρ(T) = 0 ⇒ ρ(t) = 1 − e^{t−T}
        let sys = Scalar {
            rates: vec![-1.0],
            lin: 1.0,
            quad: 0.0,
        };
        let t_end = 1.5;
        let sched = ModeSchedule::constant(0, t_end, 1).unwrap();
        let x = integrate_state(&sys, &sched, &[1.0], &tight()).unwrap();
        let rho = integrate_adjoint(&sys, &sched, &x, &tight()).unwrap();
        assert_eq!(rho.final_value()[0], 0.0);
        for t in [0.0, 0.3, 0.77, 1.2, 1.5] {
            assert_abs_diff_eq!(rho.value(t)[0], 1.0 - (t - t_end).exp(), epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_cost_gives_zero_adjoint() {
        let sys = Scalar {
            rates: vec![-1.0, 2.0],
            lin: 0.0,
            quad: 0.0,
        };
        let sched = ModeSchedule::new(vec![1, 0], vec![0.5], 1.0, 2).unwrap();
        let x = integrate_state(&sys, &sched, &[1.0], &tight()).unwrap();
        let rho = integrate_adjoint(&sys, &sched, &x, &tight()).unwrap();
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert_eq!(rho.value(t)[0], 0.0);
        }
    }

    #[test]
    fn oscillator_conserves_radius_across_switches() {
        let sched = ModeSchedule::new(vec![0, 1, 0], vec![1.0, 2.5], 4.0, 2).unwrap();
        let x = integrate_state(&Oscillator, &sched, &[1.0, 0.0], &tight()).unwrap();
        for t in [0.5, 1.0, 2.0, 3.9, 4.0] {
            let v = x.value(t);
            assert_abs_diff_eq!(v[0].hypot(v[1]), 1.0, epsilon = 1e-10);
        }
        // net angle 1 − 1.5 + 1.5 = 1
        let v = x.final_value();
        assert_abs_diff_eq!(v[0], 1.0f64.cos(), epsilon = 1e-10);
        assert_abs_diff_eq!(v[1], -1.0f64.sin(), epsilon = 1e-10);
        assert_abs_diff_eq!(evaluate_cost(&Oscillator, &x), 2.0, epsilon = 1e-10);
    }

    #[test]
    fn quadrature_fallback_matches_accumulator() {
        let sched = ModeSchedule::new(vec![0, 1], vec![1.3], 3.0, 2).unwrap();
        let mut x = integrate_state(&Oscillator, &sched, &[0.3, 0.8], &tight()).unwrap();
        let acc = evaluate_cost(&Oscillator, &x);
        x.integral = None;
        assert_abs_diff_eq!(evaluate_cost(&Oscillator, &x), acc, epsilon = 1e-10);
    }

    #[test]
    fn refinement_converges() {
        let sys = Scalar {
            rates: vec![-0.7, 0.9],
            lin: 0.5,
            quad: 1.0,
        };
        let sched = ModeSchedule::new(vec![0, 1, 0], vec![0.8, 1.9], 3.0, 2).unwrap();
        let j_coarse = evaluate_cost(
            &sys,
            &integrate_state(
                &sys,
                &sched,
                &[1.0],
                &IntegratorOptions::with_tolerance(1e-6, 1e-6),
            )
            .unwrap(),
        );
        let j_fine = evaluate_cost(
            &sys,
            &integrate_state(
                &sys,
                &sched,
                &[1.0],
                &IntegratorOptions::with_tolerance(5e-7, 5e-7),
            )
            .unwrap(),
        );
        assert!((j_coarse - j_fine).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let sys = Scalar {
            rates: vec![-1.0],
            lin: 0.0,
            quad: 0.0,
        };
        let sched = ModeSchedule::constant(0, 1.0, 1).unwrap();
        assert!(integrate_state(&sys, &sched, &[1.0, 2.0], &tight()).is_err());
        assert!(integrate_state(
            &sys,
            &sched,
            &[1.0],
            &IntegratorOptions::with_tolerance(0.0, 1e-6)
        )
        .is_err());
        let wrong = ModeSchedule::constant(0, 1.0, 2).unwrap();
        assert!(integrate_state(&sys, &wrong, &[1.0], &tight()).is_err());
    }

    #[test]
    fn blow_up_reports_time_and_mode() {
        struct Blowup;
        impl SwitchedSystem<f64> for Blowup {
            fn num_modes(&self) -> usize {
                1
            }
            fn num_states(&self) -> usize {
                1
            }
            fn mode_field(&self, _m: usize, x: &[f64], out: &mut [f64]) {
                out[0] = x[0] * x[0];
            }
            fn mode_jacobian(&self, _m: usize, x: &[f64], out: &mut [f64]) {
                out[0] = 2.0 * x[0];
            }
            fn running_cost(&self, _x: &[f64]) -> f64 {
                0.0
            }
            fn running_cost_gradient(&self, _x: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
        }
        // x = 1/(1 − t) escapes at t = 1
        let sched = ModeSchedule::constant(0, 2.0, 1).unwrap();
        match integrate_state(&Blowup, &sched, &[1.0], &IntegratorOptions::default()) {
            Err(SchedError::Integration { time, mode, .. }) => {
                assert!(time > 0.9 && time <= 1.0 + 1e-6, "time = {time}");
                assert_eq!(mode, 1);
            }
            other => panic!("expected integration failure, got {other:?}"),
        }
    }

    #[test]
    fn works_in_single_precision() {
        struct Decay;
        impl SwitchedSystem<f32> for Decay {
            fn num_modes(&self) -> usize {
                1
            }
            fn num_states(&self) -> usize {
                1
            }
            fn mode_field(&self, _m: usize, x: &[f32], out: &mut [f32]) {
                out[0] = -x[0];
            }
            fn mode_jacobian(&self, _m: usize, _x: &[f32], out: &mut [f32]) {
                out[0] = -1.0;
            }
            fn running_cost(&self, x: &[f32]) -> f32 {
                x[0]
            }
            fn running_cost_gradient(&self, _x: &[f32], out: &mut [f32]) {
                out[0] = 1.0;
            }
        }
        let sched = ModeSchedule::<f32>::constant(0, 1.0, 1).unwrap();
        let x = integrate_state(&Decay, &sched, &[1.0], &IntegratorOptions::default()).unwrap();
        assert!((x.final_value()[0] - (-1.0f32).exp()).abs() < 1e-4);
        assert!((evaluate_cost(&Decay, &x) - (1.0 - (-1.0f32).exp())).abs() < 1e-4);
    }

    #[test]
    fn csv_export_has_uniform_grid() {
        let sched = ModeSchedule::constant(0, 1.0, 2).unwrap();
        let x = integrate_state(&Oscillator, &sched, &[1.0, 0.0], &tight()).unwrap();
        let csv = x.to_csv(4, &["p", "q"]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,p,q");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("1,"));
        assert!(x.knots_json().contains("boundaries"));
    }
}
