//! Seeded finite-difference suite over every differentiable operation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::{align_resolution, csrpd_loss, FeaturePyramid, TeacherFeature};
use crate::enhance::{csga_with_tokens, siga_with_prototypes, EnhancerParams, QuerySet};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::tensor::{smooth_l1, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instance: usize,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub instances: usize,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.report.pass)
    }

    /// Worst deviation per check name, in suite order.
    pub fn summary(&self) -> Vec<(&'static str, f64, bool)> {
        let mut out: Vec<(&'static str, f64, bool)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(n, _, _)| *n == c.name) {
                Some(entry) => {
                    entry.1 = entry.1.max(c.report.max_rel_deviation);
                    entry.2 &= c.report.pass;
                }
                None => out.push((c.name, c.report.max_rel_deviation, c.report.pass)),
            }
        }
        out
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Weighted sum `Σ w ⊙ y`, so every output entry influences the loss.
fn weighted_sum(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.sum())
}

type Check = (
    &'static str,
    fn(&mut ChaCha8Rng, f64, f64) -> Result<GradCheckReport>,
);

const CHECKS: [Check; 10] = [
    ("matmul", check_matmul),
    ("softmax_rows", check_softmax),
    ("layer_norm", check_layer_norm),
    ("l2_normalize_columns", check_l2_normalize),
    ("smooth_l1", check_smooth_l1),
    ("align_resolution", check_align),
    ("siga", check_siga),
    ("csga", check_csga),
    ("csrpd_loss", check_csrpd),
    ("scpqe", check_scpqe),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check on `instances` independently seeded random inputs.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    gradient_suite_with(seed, instances, FD_STEP, FD_TOL)
}

/// [`gradient_suite`] with an explicit difference step and tolerance.
pub fn gradient_suite_with(
    seed: u64,
    instances: usize,
    step: f64,
    tol: f64,
) -> Result<SuiteReport> {
    let mut checks = Vec::with_capacity(instances * CHECKS.len());
    for (k, (name, run)) in CHECKS.iter().enumerate() {
        for i in 0..instances {
            checks.push(CheckResult {
                name,
                instance: i,
                report: run(&mut instance_rng(seed, k, i), step, tol)?,
            });
        }
    }
    let pass = checks.iter().all(|c| c.report.pass);
    Ok(SuiteReport {
        seed,
        instances,
        checks,
        pass,
    })
}

/// Re-runs one instance of one named check, e.g. to vary the step.
pub fn check_instance(
    name: &str,
    seed: u64,
    instance: usize,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (k, (_, run)) = CHECKS
        .iter()
        .enumerate()
        .find(|(_, (n, _))| *n == name)
        .ok_or_else(|| Error::Lookup(format!("no gradient check named {name:?}")))?;
    run(&mut instance_rng(seed, k, instance), step, tol)
}

fn instance_rng(seed: u64, check: usize, instance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((check as u64) << 32) | instance as u64);
    rng
}

fn check_matmul(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let (m, k, n) = (
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..4),
    );
    let w = uniform(&[m, n], rng);
    grad_check_many(
        |x| weighted_sum(&x[0].matmul(&x[1])?, &w),
        &[uniform(&[m, k], rng), uniform(&[k, n], rng)],
        step,
        tol,
    )
}

fn check_softmax(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let (r, c) = (rng.random_range(1..4), rng.random_range(2..6));
    let w = uniform(&[r, c], rng);
    grad_check_many(
        |x| weighted_sum(&x[0].softmax_rows()?, &w),
        &[uniform(&[r, c], rng)],
        step,
        tol,
    )
}

fn check_layer_norm(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let (n, d) = (rng.random_range(1..4), rng.random_range(2..6));
    let w = uniform(&[n, d], rng);
    grad_check_many(
        |x| weighted_sum(&x[0].layer_norm(&x[1], &x[2], 1e-5)?, &w),
        &[
            uniform(&[n, d], rng),
            uniform(&[d], rng),
            uniform(&[d], rng),
        ],
        step,
        tol,
    )
}

fn check_l2_normalize(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let (c, n) = (rng.random_range(2..5), rng.random_range(1..5));
    let w = uniform(&[c, n], rng);
    grad_check_many(
        |x| weighted_sum(&x[0].l2_normalize_columns(1e-12)?, &w),
        &[uniform(&[c, n], rng)],
        step,
        tol,
    )
}

fn check_smooth_l1(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let beta = rng.random_range(0.5..1.5);
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let pred = Tensor::rand_uniform(&shape, -2.0, 2.0, rng);
    let target = Tensor::rand_uniform(&shape, -2.0, 2.0, rng);
    grad_check_many(
        |x| smooth_l1(&x[0], &x[1], beta),
        &[pred, target],
        step,
        tol,
    )
}

fn check_align(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let c = rng.random_range(1..3);
    let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
    let target = (rng.random_range(1..6), rng.random_range(1..6));
    let wts = uniform(&[c, target.0, target.1], rng);
    grad_check_many(
        |x| weighted_sum(&align_resolution(&x[0], target)?, &wts),
        &[uniform(&[c, h, w], rng)],
        step,
        tol,
    )
}

const SMALL_TEACHER: usize = 3;
const SMALL_QUERY: usize = 4;
const SMALL_HEADS: usize = 2;

fn small_params(rng: &mut ChaCha8Rng) -> Result<EnhancerParams> {
    EnhancerParams::init(SMALL_TEACHER, SMALL_QUERY, SMALL_HEADS, rng.random())
}

fn check_siga(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let params = small_params(rng)?;
    let nq = rng.random_range(1..4);
    let k = rng.random_range(1..4);
    let w = uniform(&[nq, SMALL_QUERY], rng);
    let mut inputs = params.tensors();
    inputs.push(uniform(&[nq, SMALL_QUERY], rng));
    inputs.push(uniform(&[k, SMALL_TEACHER], rng));
    grad_check_many(
        |x| {
            let p = params.with_tensors(&x[..24])?;
            let out = siga_with_prototypes(&QuerySet::new(x[24].clone())?, &x[25], &p)?;
            weighted_sum(out.queries(), &w)
        },
        &inputs,
        step,
        tol,
    )
}

fn check_csga(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let params = small_params(rng)?;
    let nq = rng.random_range(1..4);
    let n_tok = rng.random_range(1..5);
    let w = uniform(&[nq, SMALL_QUERY], rng);
    let protos = uniform(&[2, SMALL_TEACHER], rng);
    let mut inputs = params.tensors();
    inputs.push(uniform(&[nq, SMALL_QUERY], rng));
    inputs.push(uniform(&[n_tok, SMALL_TEACHER], rng));
    grad_check_many(
        |x| {
            let p = params.with_tensors(&x[..24])?;
            // reach the post-semantic stage with constant prototypes
            let q_s = siga_with_prototypes(&QuerySet::new(x[24].clone())?, &protos, &p)?;
            let out = csga_with_tokens(&q_s, &x[25], &p)?;
            weighted_sum(out.queries(), &w)
        },
        &inputs,
        step,
        tol,
    )
}

fn check_csrpd(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let c = rng.random_range(2..5);
    let ct = rng.random_range(2..6);
    let teacher_grid = (rng.random_range(2..4), rng.random_range(2..4));
    let shapes: Vec<(usize, usize)> = (0..3)
        .map(|_| (rng.random_range(1..5), rng.random_range(1..5)))
        .collect();
    let maps: Vec<Tensor> = shapes
        .iter()
        .map(|&(h, w)| uniform(&[c, h, w], rng))
        .collect();
    let teacher = TeacherFeature::new(
        uniform(&[ct, teacher_grid.0, teacher_grid.1], rng),
        "random",
    )?;
    let levels: BTreeSet<usize> = [0, 1, 2].into();
    let beta = rng.random_range(0.05..1.0);
    grad_check_many(
        |x| {
            let pyramid = FeaturePyramid::from_maps(x.to_vec())?;
            Ok(csrpd_loss(&pyramid, &teacher, &levels, beta)?.total)
        },
        &maps,
        step,
        tol,
    )
}

fn check_scpqe(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let params = small_params(rng)?;
    let nq = rng.random_range(1..4);
    let mut inputs = params.tensors();
    inputs.push(uniform(&[nq, SMALL_QUERY], rng));
    let protos = uniform(&[rng.random_range(1..4), SMALL_TEACHER], rng);
    let tokens = uniform(&[rng.random_range(1..5), SMALL_TEACHER], rng);
    grad_check_many(
        |x| {
            let p = params.with_tensors(&x[..24])?;
            let q_s = siga_with_prototypes(&QuerySet::new(x[24].clone())?, &protos, &p)?;
            let q_p = csga_with_tokens(&q_s, &tokens, &p)?;
            let out = q_p.queries();
            Ok(out.mul(out)?.sum())
        },
        &inputs,
        step,
        tol,
    )
}
