//! Exact mixture-loss splits on random small distributions, and the three
//! sign cases on random parameter draws.

use rand::Rng as _;
use serde::Serialize;

use super::output::{Check, OutputDir};
use super::ExperimentSpec;
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::theory::{lemma1_check, verify_prop1, DiscreteJoint, ModelTable, Prop1Case};

/// A clean and a noise joint on disjoint cells of an `|X| × V` table, plus a
/// strictly positive model on every prefix.
pub(crate) fn random_instance(rng: &mut Rng) -> Result<(DiscreteJoint, DiscreteJoint, f64, ModelTable)> {
    let prefixes = rng.random_range(1..=6);
    let v = rng.random_range(2..=8);
    let cells = prefixes * v;
    // 0: unused, 1: clean, 2: noise; both supports non-empty
    let mut owner: Vec<u8> = (0..cells).map(|_| rng.random_range(0..3)).collect();
    let clean_cell = rng.random_range(0..cells);
    owner[clean_cell] = 1;
    let noise_cell = (clean_cell + rng.random_range(1..cells)) % cells;
    owner[noise_cell] = 2;
    let weights = |tag: u8, rng: &mut Rng| -> Vec<f64> {
        let raw: Vec<f64> = owner.iter().map(|&o| if o == tag { rng.random_range(0.01..1.0) } else { 0.0 }).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    };
    let pc = DiscreteJoint::new(prefixes, v, weights(1, rng))?;
    let pn = DiscreteJoint::new(prefixes, v, weights(2, rng))?;
    let alpha = rng.random_range(0.0..1.0);
    let rows = (0..prefixes)
        .map(|_| {
            let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            Some(raw.iter().map(|w| w / total).collect())
        })
        .collect();
    Ok((pc, pn, alpha, ModelTable::new(v, rows)?))
}

#[derive(Serialize)]
struct CaseSummary {
    case: u8,
    draws: usize,
    grid: usize,
    evaluations: usize,
    counterexamples: usize,
    skipped: usize,
    max_residual: f64,
}

pub(crate) fn run(spec: &ExperimentSpec, out: &mut OutputDir, checks: &mut Vec<Check>) -> Result<()> {
    let t = &spec.config.theory;
    if t.lemma1_instances > 0 {
        let mut rng = rng::seeded(spec.seed);
        let mut max_residual = 0.0f64;
        out.write_with("lemma1.csv", |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["instance", "prefixes", "vocab_size", "alpha", "loss_mixed", "loss_noise", "loss_clean", "residual"])?;
            for i in 0..t.lemma1_instances {
                let (pc, pn, alpha, h) = random_instance(&mut rng)?;
                let c = lemma1_check(&pc, &pn, alpha, &h)?;
                max_residual = max_residual.max(c.residual);
                csv.write_record([
                    i.to_string(),
                    pc.prefixes().to_string(),
                    pc.vocab_size().to_string(),
                    alpha.to_string(),
                    c.mixed.to_string(),
                    c.noise.to_string(),
                    c.clean.to_string(),
                    c.residual.to_string(),
                ])?;
            }
            csv.flush()?;
            Ok(())
        })?;
        checks.push(Check::new(
            "lemma1",
            max_residual <= t.lemma1_tolerance,
            format!("{} instances, max residual {max_residual:e} (tolerance {:e})", t.lemma1_instances, t.lemma1_tolerance),
        ));
    }

    let mut summaries = Vec::new();
    for &n in &t.cases {
        let case = Prop1Case::from_number(n)?;
        let report = verify_prop1(case, t.draws, t.grid, spec.seed);
        out.write_json(&format!("prop1_case{n}.json"), &report)?;
        checks.push(Check::new(
            &format!("prop1_case{n}"),
            report.passed(),
            format!(
                "{} draws x {} grid points: {} counterexamples, {} skipped, max residual {:e}",
                report.draws,
                report.grid,
                report.counterexamples.len(),
                report.skipped.len(),
                report.max_residual
            ),
        ));
        summaries.push(CaseSummary {
            case: n,
            draws: report.draws,
            grid: report.grid,
            evaluations: report.evaluations,
            counterexamples: report.counterexamples.len(),
            skipped: report.skipped.len(),
            max_residual: report.max_residual,
        });
    }
    out.write_json("summary.json", &summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_have_disjoint_nonempty_supports() {
        let mut rng = rng::seeded(3);
        for _ in 0..200 {
            let (pc, pn, alpha, _) = random_instance(&mut rng).unwrap();
            assert!((0.0..1.0).contains(&alpha));
            assert!(pc.table().iter().zip(pn.table()).all(|(c, n)| *c == 0.0 || *n == 0.0));
            assert!(pc.total_mass() > 0.99 && pn.total_mass() > 0.99);
        }
    }
}
