//! Aggregation cost against client count. Kept in its own binary so no other
//! test competes for the CPU while it measures.

use flbench::defenses::{build_defense, ServerContext};
use flbench::harness::time_aggregation;
use flbench::params::Params;
use flbench::rng::stream;
use flbench::vector::UpdateVector;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn quadratic_rules_outgrow_median() {
    let d = 10_000;
    let mut ratios = Vec::new();
    for n in [10usize, 50, 100] {
        let mut rng = stream(5, "complexity", n as u64, 0);
        let vs: Vec<UpdateVector> = (0..n)
            .map(|_| UpdateVector((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        let f = (n - 3) / 4;
        let ctx = ServerContext::bare(0, 0);
        let time = |name: &str| {
            let rule = build_defense(name, Params::new(), f).unwrap();
            time_aggregation(rule.as_ref(), &vs, &ctx).unwrap()
        };
        let (median, krum, bulyan) = (time("median"), time("krum"), time("bulyan"));
        eprintln!("n={n}: median {median:.2e}s krum {krum:.2e}s bulyan {bulyan:.2e}s");
        assert!(median < bulyan && krum < bulyan, "n={n}");
        // at n = 10 a 10-element selection costs about as much as 45 distance terms
        if n >= 50 {
            assert!(median < krum, "n={n}");
        }
        ratios.push(krum / median);
    }
    assert!(ratios.windows(2).all(|w| w[1] > w[0]), "Krum/Median time ratio should grow with n: {ratios:?}");
}
