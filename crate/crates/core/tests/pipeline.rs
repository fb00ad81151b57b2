//! End-to-end runs through the public API.

use nalgebra::DMatrix;
use rand::Rng;
use spectralds::distill::{build_pair_bank, compose_lds, distill_stu_model, lds_to_lds, practical_distill, BankFit, PracticalConfig};
use spectralds::stu::ImpulseFitter;
use spectralds::{compute_basis, rng, AlphaSampler, DiagonalLds, DistilledFilters, HankelSpec, Persist, SpectralBasis, StuParams};

fn distilled(l: usize, k: usize, h: usize, seed: u64) -> (SpectralBasis, DistilledFilters) {
    let basis = compute_basis(HankelSpec::new(l).unwrap(), k).unwrap();
    let bank = build_pair_bank(&basis, 400, &AlphaSampler::new(seed).signed(), f64::INFINITY, &BankFit::Joint).unwrap();
    let d = practical_distill(&bank, &basis, &PracticalConfig::new(k, h, 10, seed)).unwrap();
    (basis, d.filters)
}

fn inputs(seed: u64, t: usize, n: usize) -> DMatrix<f64> {
    let mut r = rng::stream(seed, "pipeline-inputs");
    DMatrix::from_fn(t, n, |_, _| r.random_range(-1.0..1.0))
}

#[test]
fn stu_to_recurrence_survives_persistence() {
    let (basis, filters) = distilled(256, 6, 20, 1);
    let dir = tempfile::tempdir().unwrap();
    basis.save(&dir.path().join("basis")).unwrap();
    filters.save(&dir.path().join("filters")).unwrap();
    let basis = SpectralBasis::load(&dir.path().join("basis")).unwrap();
    let filters = DistilledFilters::load(&dir.path().join("filters")).unwrap();

    let params = StuParams::random(6, 3, 2, 0.4, &mut rng::stream(1, "pipeline-params"));
    let u = inputs(1, 256, 2);
    let conv = params.forward_nonar(&basis, &u).unwrap();
    let rec = distill_stu_model(&params, &filters).unwrap().run(&u).unwrap();
    let explicit = compose_lds(&params, &filters).unwrap().simulate(&u, None).unwrap();

    // Cauchy-Schwarz per output: |dy| <= sum_j,c (|M+| + |M-|) |dphi_j| |u_c|.
    let (per, _) = filters.errors(&basis).unwrap();
    let bound = (0..3)
        .map(|o| {
            (0..6)
                .flat_map(|j| (0..2).map(move |c| (j, c)))
                .map(|(j, c)| (params.m_plus()[j][(o, c)].abs() + params.m_minus()[j][(o, c)].abs()) * per[j] * u.column(c).norm())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    assert!((&conv - &rec).amax() <= bound, "{} > {bound}", (&conv - &rec).amax());
    assert!((&rec - &explicit).amax() <= 1e-10 * conv.amax());
}

#[test]
fn recurrence_runs_past_the_filter_length() {
    let (_, filters) = distilled(128, 5, 16, 2);
    let params = StuParams::random(5, 1, 1, 1.0, &mut rng::stream(2, "pipeline-params"));
    let mut model = distill_stu_model(&params, &filters).unwrap();
    let y = model.run(&inputs(2, 4 * 128, 1)).unwrap();
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn lds_to_lds_preserves_the_impulse_response() {
    let (basis, filters) = distilled(256, 16, 40, 3);
    let source = DiagonalLds::new(
        vec![0.95, 0.5, -0.7],
        DMatrix::from_row_slice(3, 1, &[1.0, -0.5, 0.25]),
        DMatrix::from_row_slice(2, 3, &[0.3, 0.1, -0.2, 0.05, 0.4, 0.1]),
    )
    .unwrap();
    let fitter = ImpulseFitter::new(&basis).unwrap();
    let out = lds_to_lds(&source, &fitter, &filters).unwrap();
    assert_eq!(out.lds.state_dim(), 2 * 40);
    let energy = out.source_impulse.as_slice().iter().map(|v| v * v).sum::<f64>() / out.source_impulse.as_slice().len() as f64;
    assert!(out.impulse_mse <= 1e-6 * energy, "impulse mse {} vs energy {energy}", out.impulse_mse);
}
