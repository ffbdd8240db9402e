//! Batch experiments behind the command-line runner.  Each study returns a
//! [`StudyReport`] carrying the resolved configuration, a schema version,
//! the list of falsified checks, a JSON result and a CSV table.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bellman::{
    concavity_gain_check, lemma51_verify, range_check, BellmanOracle, BellmanPoint, GridBellman, MartingaleTree,
    ModifiedMartingale, QuadraticBellman, GRID_CAP, ORACLE_DEPTH_CAP,
};
use crate::dyadic::{DyadicInterval, DyadicSystem};
use crate::error::{Error, Result};
use crate::normlab::{hilbert_demo, shift_scaling_study, umd_probe, TestFunction};
use crate::rng::{derive_seed, trial_rng, Rng};
use crate::scalar::Exact;
use crate::schur::{
    find_alpha, multiplier_norm_lower, norm1_with, norm2, random_sign_matrix, LambdaMatrix, Norm1Options,
};
use crate::shift::{paraproduct_identity_sides, series_bound, ShiftSpec};
use crate::signal::{umd_factor_four_sides, SpaceSpec, StepFunction};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Identities,
    SchurCheck,
    LambdaEquivalence,
    BellmanCheck,
    Lemma51,
    UmdProbe,
    ScalingStudy,
    HilbertDemo,
    SeriesBound,
}

impl Study {
    pub const ALL: [Study; 9] = [
        Study::Identities,
        Study::SchurCheck,
        Study::LambdaEquivalence,
        Study::BellmanCheck,
        Study::Lemma51,
        Study::UmdProbe,
        Study::ScalingStudy,
        Study::HilbertDemo,
        Study::SeriesBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::Identities => "identities",
            Study::SchurCheck => "schur-check",
            Study::LambdaEquivalence => "lambda-equivalence",
            Study::BellmanCheck => "bellman-check",
            Study::Lemma51 => "lemma51",
            Study::UmdProbe => "umd-probe",
            Study::ScalingStudy => "scaling-study",
            Study::HilbertDemo => "hilbert-demo",
            Study::SeriesBound => "series-bound",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown study `{s}`")))
    }
}

/// Fully resolved parameters of one study.  Fields a study does not use are
/// still recorded so that reports are self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub seed: u64,
    pub depth: u32,
    /// Complexity or matrix level; `0` selects the study's range default.
    pub k: u32,
    pub p: f64,
    pub q: f64,
    pub d: usize,
    pub trials: usize,
    pub grid_resolution: usize,
    pub delta: f64,
    pub degree: u32,
    pub k_max: u32,
    pub tolerance: f64,
    pub kg: f64,
}

/// Parameter caps enforced by [`StudyConfig::validate`].
pub const MAX_DEPTH: u32 = 12;
pub const MAX_EXACT_DEPTH: u32 = 8;
pub const MAX_K: u32 = 6;
pub const MAX_TRIALS: usize = 100_000;
pub const MAX_D: usize = 8;
pub const MAX_K_MAX: u32 = 100_000;

impl StudyConfig {
    pub fn defaults(study: Study) -> Self {
        let mut c = StudyConfig {
            seed: 1,
            depth: 6,
            k: 2,
            p: 2.0,
            q: 2.0,
            d: 1,
            trials: 20,
            grid_resolution: 17,
            delta: 0.75,
            degree: 2,
            k_max: 60,
            tolerance: 1e-6,
            kg: crate::schur::KG_DEFAULT,
        };
        match study {
            Study::Identities => c.trials = 10,
            Study::SchurCheck => c.trials = 100,
            Study::LambdaEquivalence => {
                c.k = 0;
                c.trials = 500;
            }
            Study::BellmanCheck => {
                c.depth = 2;
                c.trials = 200;
            }
            Study::Lemma51 => {
                c.depth = 3;
                c.k = 1;
            }
            Study::UmdProbe => {
                c.depth = 8;
                c.p = 4.0;
            }
            Study::ScalingStudy => {
                c.depth = 8;
                c.k = 5;
                c.p = 4.0;
                c.trials = 10;
            }
            Study::HilbertDemo => {
                c.depth = 10;
                c.trials = 2000;
            }
            Study::SeriesBound => {}
        }
        c
    }

    pub fn validate(&self, study: Study) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let depth_cap = match study {
            Study::Identities => MAX_EXACT_DEPTH,
            Study::BellmanCheck | Study::Lemma51 => ORACLE_DEPTH_CAP,
            _ => MAX_DEPTH,
        };
        if self.depth > depth_cap {
            return bad(format!("depth {} exceeds cap {depth_cap} for {study}", self.depth));
        }
        if self.k > MAX_K {
            return bad(format!("k = {} exceeds cap {MAX_K}", self.k));
        }
        if self.trials > MAX_TRIALS {
            return bad(format!("trials = {} exceeds cap {MAX_TRIALS}", self.trials));
        }
        if self.d == 0 || self.d > MAX_D {
            return bad(format!("d = {} must lie in 1..={MAX_D}", self.d));
        }
        if self.grid_resolution > GRID_CAP {
            return bad(format!(
                "grid resolution {} exceeds cap {GRID_CAP}",
                self.grid_resolution
            ));
        }
        if self.k_max > MAX_K_MAX {
            return bad(format!("k_max = {} exceeds cap {MAX_K_MAX}", self.k_max));
        }
        if !(self.tolerance > 0.0) || !(self.kg >= 1.0) {
            return bad("tolerance must be positive and kg at least 1".into());
        }
        SpaceSpec::new(self.p, self.q, self.d)?;
        Ok(())
    }

    fn space(&self) -> Result<SpaceSpec> {
        SpaceSpec::new(self.p, self.q, self.d)
    }
}

/// A CSV table of stringified cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub study: Study,
    pub config: StudyConfig,
    /// `"pass"` or `"falsified"`.
    pub status: String,
    /// Names of violated checks.
    pub falsified: Vec<String>,
    pub result: Value,
    #[serde(skip)]
    pub table: Table,
}

impl StudyReport {
    fn new(study: Study, config: &StudyConfig, falsified: Vec<String>, result: Value, table: Table) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            study,
            config: config.clone(),
            status: if falsified.is_empty() { "pass" } else { "falsified" }.into(),
            falsified,
            result,
            table,
        }
    }

    pub fn passed(&self) -> bool {
        self.falsified.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn run(study: Study, config: &StudyConfig) -> Result<StudyReport> {
    config.validate(study)?;
    match study {
        Study::Identities => identities(config),
        Study::SchurCheck => schur_check(config),
        Study::LambdaEquivalence => lambda_equivalence(config),
        Study::BellmanCheck => bellman_check(config),
        Study::Lemma51 => lemma51(config),
        Study::UmdProbe => umd(config),
        Study::ScalingStudy => scaling(config),
        Study::HilbertDemo => hilbert(config),
        Study::SeriesBound => series(config),
    }
}

/// Result of one exact identity over all instances.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityOutcome {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    pub status: String,
}

pub const IDENTITY_NAMES: [&str; 10] = [
    "haar_round_trip",
    "martingale_dynamics",
    "umd_factor_four",
    "slice_partition",
    "symmetrized_self_adjoint",
    "paraproduct_identity",
    "lambda_zero_line_sums",
    "modified_pairing_identity",
    "modified_convex_combination",
    "modified_product_formula",
];

/// Balanced `α` with entries `±r/16`, `0 <= r <= 4`, in random positions.
fn random_exact_alpha(n: usize, rng: &mut Rng) -> Vec<Exact> {
    let mut alpha: Vec<Exact> = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let r: i64 = rng.random_range(-4..=4);
        alpha.push(Exact::rational(r, 16));
        alpha.push(Exact::rational(-r, 16));
    }
    alpha.shuffle(rng);
    alpha
}

/// Evaluates every exact identity on `trials` random instances in ℚ(√2).
pub fn exact_identity_suite(depth: u32, trials: usize, seed: u64) -> Result<Vec<IdentityOutcome>> {
    if depth < 1 {
        return Err(Error::InvalidParameter("identity suite needs depth >= 1".into()));
    }
    let sys = DyadicSystem::standard(0, depth)?;
    let space = SpaceSpec::scalar(2.0)?;
    let mut failures = [0usize; 10];
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let f = StepFunction::<Exact>::random_integer(sys.clone(), 1, 5, &mut rng);
        let g = StepFunction::<Exact>::random_integer(sys.clone(), 1, 5, &mut rng);
        let mut ok = [true; 10];

        ok[0] = f.expansion().reconstruct() == f;
        ok[1] = MartingaleTree::from_functions(&f, &g, DyadicInterval::ROOT, depth, space)
            .and_then(|tree| tree.verify())
            .is_ok();
        let (l, r) = umd_factor_four_sides(&f, &g)?;
        ok[2] = l == r;

        let reach = (depth - 1).min(2);
        let (m, n) = (rng.random_range(0..=reach), rng.random_range(0..=reach));
        let shift = ShiftSpec::<Exact>::random_extremal(m, n, &sys, &mut rng)?;
        let whole = shift.apply(&f)?;
        let mut sum = StepFunction::zeros(sys.clone(), 1);
        for j in 0..shift.complexity() {
            sum = sum.add(&shift.slice(j)?.apply(&f)?)?;
        }
        ok[3] = sum == whole;
        let sym = shift.symmetrize();
        ok[4] = sym.is_self_adjoint() && sym.apply(&f)?.inner(&g)? == f.inner(&sym.apply(&g)?)?;

        let (pl, pr) = paraproduct_identity_sides(&g, &f)?;
        ok[5] = pl == pr;

        let k = 1 + (t as u32 % 4).min(depth - 1);
        let tree = MartingaleTree::from_functions(&f, &g, DyadicInterval::ROOT, k, space)?;
        ok[6] = LambdaMatrix::from_tree(&tree, k)?.zero_line_sums();
        let alpha = random_exact_alpha(1 << k, &mut rng);
        let checks = ModifiedMartingale::new(&tree, &alpha, k)?.check(&tree);
        ok[7] = checks.pairing_identity && checks.root_midpoint;
        ok[8] = checks.convex_combination && checks.theta_sum_one;
        ok[9] = checks.product_formula;
        for (fail, good) in failures.iter_mut().zip(ok) {
            *fail += usize::from(!good);
        }
    }
    Ok(IDENTITY_NAMES
        .iter()
        .zip(failures)
        .map(|(name, failures)| IdentityOutcome {
            name: name.to_string(),
            instances: trials,
            failures,
            status: if failures == 0 { "pass" } else { "fail" }.into(),
        })
        .collect())
}

fn identities(c: &StudyConfig) -> Result<StudyReport> {
    let outcomes = exact_identity_suite(c.depth, c.trials, c.seed)?;
    let mut table = Table::new(&["identity", "instances", "failures", "status"]);
    for o in &outcomes {
        table.push(row![o.name, o.instances, o.failures, o.status]);
    }
    let falsified = outcomes
        .iter()
        .filter(|o| o.failures > 0)
        .map(|o| o.name.clone())
        .collect();
    Ok(StudyReport::new(
        Study::Identities,
        c,
        falsified,
        json!({ "depth": c.depth, "identities": outcomes }),
        table,
    ))
}

/// Per-matrix quantities of the λ-matrix experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub trial: usize,
    pub k: u32,
    pub sum_abs_lambda: f64,
    pub norm1_lower: f64,
    pub norm2: f64,
    pub norm2_exact: bool,
    pub ratio: Option<f64>,
    pub achieved_c: f64,
    pub alpha_passes: bool,
    /// `16 norm1 <= norm2`, with relative slack `1e-12` for rounding.
    pub scaling_16: bool,
    /// `norm2 <= 192 norm1`.
    pub equivalence_192: bool,
}

/// Relative rounding slack on comparisons between two computed norms.
pub const ROUNDING: f64 = 1e-12;

pub fn lambda_row(trial: usize, lambda: &LambdaMatrix<f64>, kg: f64, seed: u64) -> LambdaRow {
    let n2 = norm2(lambda);
    let opts = Norm1Options {
        seed,
        ..Norm1Options::default()
    };
    let n1 = norm1_with(lambda, &n2, &opts);
    let alpha = find_alpha(lambda, kg);
    let ratio = (n1.value > 0.0).then(|| n2.value / n1.value);
    LambdaRow {
        trial,
        k: lambda.k(),
        sum_abs_lambda: lambda.sum_abs(),
        norm1_lower: n1.value,
        norm2: n2.value,
        norm2_exact: n2.exact,
        ratio,
        achieved_c: alpha.achieved_c,
        alpha_passes: alpha.passes,
        scaling_16: 16.0 * n1.value <= n2.value * (1.0 + ROUNDING),
        equivalence_192: n2.value <= 192.0 * n1.value * (1.0 + ROUNDING),
    }
}

fn lambda_table(rows: &[LambdaRow]) -> Table {
    let mut t = Table::new(&[
        "trial",
        "k",
        "sum_abs_lambda",
        "norm1_lower",
        "norm2",
        "ratio",
        "achieved_c",
        "alpha_passes",
        "scaling_16",
        "equivalence_192",
    ]);
    for r in rows {
        t.push(row![
            r.trial,
            r.k,
            r.sum_abs_lambda,
            r.norm1_lower,
            r.norm2,
            r.ratio.map_or(String::new(), |v| v.to_string()),
            r.achieved_c,
            r.alpha_passes,
            r.scaling_16,
            r.equivalence_192
        ]);
    }
    t
}

fn schur_check(c: &StudyConfig) -> Result<StudyReport> {
    if c.k == 0 {
        return Err(Error::InvalidParameter("schur-check needs k >= 1".into()));
    }
    let rows: Vec<LambdaRow> = (0..c.trials)
        .map(|t| {
            let mut rng = trial_rng(c.seed, t as u64);
            let l = LambdaMatrix::random_admissible(c.k, &mut rng);
            lambda_row(t, &l, c.kg, derive_seed(c.seed, t as u64))
        })
        .collect();
    let n = 1usize << c.k;
    let sign_bound = 2f64.powf(c.k as f64 / 2.0);
    let mut sign_lowers = Vec::with_capacity(c.trials);
    for t in 0..c.trials {
        let mut rng = trial_rng(derive_seed(c.seed, 0x5167), t as u64);
        let m = random_sign_matrix(n, &mut rng);
        sign_lowers.push(multiplier_norm_lower(&m, 8, derive_seed(c.seed, t as u64)).lower);
    }
    let sign_max = sign_lowers.iter().copied().fold(0.0, f64::max);
    let mut falsified = Vec::new();
    if rows.iter().any(|r| !r.scaling_16) {
        falsified.push("lambda_scaling_16".into());
    }
    if rows.iter().any(|r| !r.alpha_passes) {
        falsified.push("alpha_threshold".into());
    }
    if sign_max > sign_bound + 1e-9 {
        falsified.push("sign_matrix_multiplier_bound".into());
    }
    let result = json!({
        "k": c.k,
        "threshold": 1.0 / (192.0 * c.kg),
        "min_achieved_c": rows.iter().map(|r| r.achieved_c).fold(f64::INFINITY, f64::min),
        "equivalence_192_failures": rows.iter().filter(|r| !r.equivalence_192).count(),
        "sign_matrix_bound": sign_bound,
        "sign_matrix_max_lower": sign_max,
        "rows": rows,
    });
    Ok(StudyReport::new(
        Study::SchurCheck,
        c,
        falsified,
        result,
        lambda_table(&rows),
    ))
}

/// Summary of `norm2 / norm1_lower` over a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub below_64: usize,
    pub above_192: usize,
    /// Counts in the bins `[16,32), [32,64), [64,128), [128,192], (192,∞)`.
    pub histogram: [usize; 5],
}

pub fn ratio_summary(rows: &[LambdaRow]) -> RatioSummary {
    let mut r: Vec<f64> = rows.iter().filter_map(|r| r.ratio).collect();
    r.sort_by(f64::total_cmp);
    let mut histogram = [0usize; 5];
    for &v in &r {
        let bin = match v {
            v if v < 32.0 => 0,
            v if v < 64.0 => 1,
            v if v < 128.0 => 2,
            v if v <= 192.0 => 3,
            _ => 4,
        };
        histogram[bin] += 1;
    }
    RatioSummary {
        count: r.len(),
        min: r.first().copied().unwrap_or(f64::NAN),
        median: r.get(r.len() / 2).copied().unwrap_or(f64::NAN),
        max: r.last().copied().unwrap_or(f64::NAN),
        below_64: r.iter().filter(|v| **v < 64.0).count(),
        above_192: r.iter().filter(|v| **v > 192.0 * (1.0 + ROUNDING)).count(),
        histogram,
    }
}

/// `trials` random admissible `Λ` with `k` cycling through `ks`.
pub fn lambda_equivalence_rows(ks: &[u32], trials: usize, seed: u64, kg: f64) -> Vec<LambdaRow> {
    (0..trials)
        .map(|t| {
            let k = ks[t % ks.len()];
            let mut rng = trial_rng(seed, t as u64);
            let l = LambdaMatrix::random_admissible(k, &mut rng);
            lambda_row(t, &l, kg, derive_seed(seed, t as u64))
        })
        .collect()
}

fn lambda_equivalence(c: &StudyConfig) -> Result<StudyReport> {
    let ks: Vec<u32> = if c.k == 0 { vec![1, 2, 3] } else { vec![c.k] };
    let rows = lambda_equivalence_rows(&ks, c.trials, c.seed, c.kg);
    let summary = ratio_summary(&rows);
    let mut falsified = Vec::new();
    if rows.iter().any(|r| !r.scaling_16) {
        falsified.push("lambda_scaling_16".into());
    }
    let result = json!({ "ks": ks, "summary": summary, "rows": rows });
    Ok(StudyReport::new(
        Study::LambdaEquivalence,
        c,
        falsified,
        result,
        lambda_table(&rows),
    ))
}

fn random_domain_point(rng: &mut Rng, p: f64) -> BellmanPoint<f64> {
    let pd = crate::signal::dual_exponent(p);
    let f: f64 = rng.random_range(-0.9..=0.9);
    let g: f64 = rng.random_range(-0.9..=0.9);
    let big_f = rng.random_range(f.abs().powf(p)..=1.0);
    let big_g = rng.random_range(g.abs().powf(pd)..=1.0);
    BellmanPoint::new(vec![f], big_f, vec![g], big_g)
}

fn bellman_check(c: &StudyConfig) -> Result<StudyReport> {
    let space = SpaceSpec::scalar(c.p)?;
    let oracle = GridBellman::new(c.p, c.depth + 1, c.grid_resolution)?;
    let r = oracle.resolution();
    let mut range_failures = 0usize;
    let mut monotone_failures = 0usize;
    let mut above_quadratic = 0usize;
    let mut valid_states = 0usize;
    for s in 0..r.pow(4) {
        let idx = [s / (r * r * r), (s / (r * r)) % r, (s / r) % r, s % r];
        if !oracle.is_valid(idx) {
            continue;
        }
        valid_states += 1;
        let point = oracle.point_at(idx);
        for t in 0..=oracle.max_depth() {
            let v = oracle.grid_value(t, idx);
            range_failures += usize::from(!range_check(v, &point, &space)?);
            if t > 0 && v < oracle.grid_value(t - 1, idx) {
                monotone_failures += 1;
            }
            if c.p == 2.0 && v > QuadraticBellman.value(0, &point)? * (1.0 + ROUNDING) + ROUNDING {
                above_quadratic += 1;
            }
        }
    }
    let mut table = Table::new(&["trial", "lhs", "average", "gain", "slack", "snap_displacement"]);
    let mut min_slack = f64::INFINITY;
    for t in 0..c.trials {
        let mut rng = trial_rng(c.seed, t as u64);
        let (a, b) = (random_domain_point(&mut rng, c.p), random_domain_point(&mut rng, c.p));
        let rep = concavity_gain_check(&oracle, c.depth, &a, &b)?;
        min_slack = min_slack.min(rep.slack);
        table.push(row![
            t,
            rep.lhs,
            rep.average,
            rep.gain,
            rep.slack,
            rep.snap_displacement
        ]);
    }
    let root = BellmanPoint::new(vec![0.0], 1.0, vec![0.0], 1.0);
    let depth1 = oracle.value(1.min(oracle.max_depth()), &root)?;
    let mut falsified = Vec::new();
    if range_failures > 0 {
        falsified.push("bellman_range".into());
    }
    if monotone_failures > 0 {
        falsified.push("bellman_depth_monotonicity".into());
    }
    if min_slack < 0.0 {
        falsified.push("bellman_concavity_with_gain".into());
    }
    if above_quadratic > 0 {
        falsified.push("bellman_exceeds_quadratic".into());
    }
    let result = json!({
        "oracle_depth": oracle.max_depth(),
        "grid_resolution": r,
        "valid_states": valid_states,
        "depth1_value_at_unit_point": depth1,
        "range_failures": range_failures,
        "monotone_failures": monotone_failures,
        "above_quadratic": above_quadratic,
        "concavity_pairs": c.trials,
        "min_concavity_slack": if c.trials > 0 { json!(min_slack) } else { Value::Null },
    });
    Ok(StudyReport::new(Study::BellmanCheck, c, falsified, result, table))
}

/// Random scalar tree of depth `k` from step functions on `k + 2` generations.
pub fn random_lemma_tree(k: u32, space: SpaceSpec, rng: &mut Rng) -> Result<MartingaleTree<f64>> {
    let sys = DyadicSystem::standard(0, k + 2)?;
    let f = StepFunction::random_uniform(sys.clone(), 1, rng);
    let g = StepFunction::random_uniform(sys, 1, rng);
    MartingaleTree::from_functions(&f, &g, DyadicInterval::ROOT, k, space)
}

/// Per-instance summary of the main estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub trial: usize,
    pub k: u32,
    pub sum_abs_lambda: f64,
    pub achieved_c: f64,
    pub alpha_passes: bool,
    pub degenerate: bool,
    pub bellman_drop: f64,
    pub c_emp: Option<f64>,
    pub slack_grid: f64,
    pub slack_quadratic: Option<f64>,
    pub c_emp_quadratic: Option<f64>,
    pub pairing_identity_error: f64,
    pub modified_checks: bool,
    pub snap_displacement: f64,
}

/// Runs the main estimate on `trials` random trees at each `k` in `ks`.
pub fn lemma_rows(
    ks: &[u32],
    trials: usize,
    p: f64,
    oracle_depth: u32,
    grid_resolution: usize,
    seed: u64,
    kg: f64,
) -> Result<Vec<LemmaRow>> {
    let space = SpaceSpec::scalar(p)?;
    let grid = GridBellman::new(p, oracle_depth, grid_resolution)?;
    let mut rows = Vec::new();
    for (t, k) in (0..trials).map(|t| (t, ks[t % ks.len()])) {
        let mut rng = trial_rng(seed, t as u64);
        let tree = random_lemma_tree(k, space, &mut rng)?;
        let rep = lemma51_verify(&tree, k, &grid, oracle_depth, Some(&grid), kg)?;
        let quad = if p == 2.0 {
            Some(lemma51_verify(&tree, k, &QuadraticBellman, oracle_depth, None, kg)?)
        } else {
            None
        };
        rows.push(LemmaRow {
            trial: t,
            k,
            sum_abs_lambda: rep.sum_abs_lambda,
            achieved_c: rep.alpha.achieved_c,
            alpha_passes: rep.alpha.passes,
            degenerate: rep.degenerate,
            bellman_drop: rep.bellman_drop,
            c_emp: rep.c_emp,
            slack_grid: rep.slack,
            slack_quadratic: quad.as_ref().map(|q| q.slack),
            c_emp_quadratic: quad.as_ref().and_then(|q| q.c_emp),
            pairing_identity_error: rep.pairing_identity_error,
            modified_checks: rep.modified_checks.all(),
            snap_displacement: rep.snap_displacement,
        });
    }
    Ok(rows)
}

/// Tolerance on floating-point identities inside the main estimate.
pub const LEMMA_TOL: f64 = 1e-9;

fn lemma51(c: &StudyConfig) -> Result<StudyReport> {
    if c.k == 0 || c.k > 2 {
        return Err(Error::InvalidParameter("lemma51 supports k in 1..=2".into()));
    }
    if c.depth < c.k {
        return Err(Error::InvalidParameter(format!(
            "oracle depth {} below k = {}",
            c.depth, c.k
        )));
    }
    let rows = lemma_rows(&[c.k], c.trials, c.p, c.depth, c.grid_resolution, c.seed, c.kg)?;
    let mut falsified = Vec::new();
    if rows.iter().any(|r| !r.alpha_passes) {
        falsified.push("alpha_threshold".into());
    }
    if rows.iter().any(|r| r.pairing_identity_error > LEMMA_TOL) {
        falsified.push("modified_pairing_identity".into());
    }
    if rows.iter().any(|r| !r.modified_checks) {
        falsified.push("modified_martingale_invariants".into());
    }
    if rows.iter().any(|r| r.slack_quadratic.is_some_and(|s| s < -LEMMA_TOL)) {
        falsified.push("root_step_bellman_inequality".into());
    }
    let mut table = Table::new(&[
        "trial",
        "k",
        "sum_abs_lambda",
        "achieved_c",
        "degenerate",
        "bellman_drop",
        "c_emp",
        "slack_grid",
        "slack_quadratic",
        "c_emp_quadratic",
        "snap_displacement",
    ]);
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &rows {
        table.push(row![
            r.trial,
            r.k,
            r.sum_abs_lambda,
            r.achieved_c,
            r.degenerate,
            r.bellman_drop,
            opt(r.c_emp),
            r.slack_grid,
            opt(r.slack_quadratic),
            opt(r.c_emp_quadratic),
            r.snap_displacement
        ]);
    }
    let c_emps: Vec<f64> = rows.iter().filter_map(|r| r.c_emp).collect();
    let result = json!({
        "k": c.k,
        "oracle_depth": c.depth,
        "grid": c.grid_resolution,
        "threshold": 1.0 / (192.0 * c.kg),
        "degenerate": rows.iter().filter(|r| r.degenerate).count(),
        "min_achieved_c": rows.iter().filter(|r| r.sum_abs_lambda > 0.0).map(|r| r.achieved_c).fold(f64::INFINITY, f64::min),
        "c_emp_min": c_emps.iter().copied().fold(f64::INFINITY, f64::min),
        "c_emp_max": c_emps.iter().copied().fold(0.0, f64::max),
        "rows": rows,
    });
    Ok(StudyReport::new(Study::Lemma51, c, falsified, result, table))
}

fn umd(c: &StudyConfig) -> Result<StudyReport> {
    let rep = umd_probe(&c.space()?, c.depth, c.trials, c.seed)?;
    let mut falsified = Vec::new();
    if rep.within_reference == Some(false) {
        falsified.push("martingale_transform_bound".into());
    }
    let mut table = Table::new(&["trial", "p", "norm_lower"]);
    for (t, v) in rep.per_trial.iter().enumerate() {
        table.push(row![t, rep.p, v]);
    }
    Ok(StudyReport::new(
        Study::UmdProbe,
        c,
        falsified,
        serde_json::to_value(&rep)?,
        table,
    ))
}

/// Largest tolerated growth of the implied constant from smaller to larger
/// complexity before reporting super-`k 2^{k/2}` growth.
pub const SCALING_FACTOR: f64 = 10.0;

fn scaling(c: &StudyConfig) -> Result<StudyReport> {
    let ks: Vec<u32> = (1..=c.k).collect();
    let rep = shift_scaling_study(&ks, &c.space()?, c.trials, c.depth, c.seed)?;
    let mut falsified = Vec::new();
    let growth = rep.implied_growth();
    if growth.is_some_and(|g| g > SCALING_FACTOR) {
        falsified.push("shift_growth_k_2_k_half".into());
    }
    let mut table = Table::new(&["k", "p", "trial", "m", "n", "norm_lower"]);
    for t in &rep.trials {
        table.push(row![t.k, t.p, t.trial, t.m, t.n, t.norm_lower]);
    }
    let mut result = serde_json::to_value(&rep)?;
    result["implied_growth"] = json!(growth);
    result["implied_spread"] = json!(rep.implied_spread());
    Ok(StudyReport::new(Study::ScalingStudy, c, falsified, result, table))
}

fn hilbert(c: &StudyConfig) -> Result<StudyReport> {
    let rep = hilbert_demo(c.trials, c.depth, TestFunction::standard_bump(), c.seed)?;
    let mut table = Table::new(&["cell", "x", "averaged", "hilbert"]);
    let n = rep.averaged.len();
    for (i, (a, h)) in rep.averaged.iter().zip(&rep.hilbert).enumerate() {
        table.push(row![i, (i as f64 + 0.5) / n as f64, a, h]);
    }
    Ok(StudyReport::new(
        Study::HilbertDemo,
        c,
        Vec::new(),
        serde_json::to_value(&rep)?,
        table,
    ))
}

fn series(c: &StudyConfig) -> Result<StudyReport> {
    let rep = series_bound(c.delta, c.degree, c.k_max, c.tolerance)?;
    let mut table = Table::new(&["k", "partial_sum"]);
    for (k, s) in rep.partial_sums.iter().enumerate() {
        table.push(row![k, s]);
    }
    let mut result = serde_json::to_value(&rep)?;
    result["verdict"] = json!(if rep.convergent { "convergent" } else { "divergent" });
    Ok(StudyReport::new(Study::SeriesBound, c, Vec::new(), result, table))
}
