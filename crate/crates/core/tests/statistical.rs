//! Monte Carlo checks of error control and power at small scale.

use scq::bench::{
    compare, replicate, replication_data, MethodSpec, Metric, Pipeline, RunSettings, WeightMode,
};
use scq::datamodel::SyntheticConfig;
use scq::modelselect::{ptams_plus, SelectionOptions, Toolbox};
use scq::pipeline::StructureWeighting;
use scq::scoring::{ClassifierSpec, Family, Method};
use scq::seeding::derive_seed;

fn kde() -> ClassifierSpec {
    ClassifierSpec::new(Family::Occ, Method::Kde)
}

fn null_only(m: usize, pool: usize) -> SyntheticConfig {
    SyntheticConfig {
        m,
        p: 2,
        sparsity_blocks: vec![],
        background_pi: 0.0,
        alt_components: vec![],
        null_pool_size: pool,
        seed: 0,
    }
}

#[test]
fn null_only_fdr_within_envelope() {
    let methods = [
        MethodSpec::new(
            "scq",
            Pipeline::Scq {
                classifier: kde(),
                weights: WeightMode::default(),
            },
        ),
        MethodSpec::new(
            "bh",
            Pipeline::Cfbh {
                classifier: kde(),
                storey: false,
            },
        ),
    ];
    let rows = compare(
        &methods,
        &null_only(200, 600),
        300,
        21,
        &RunSettings::default(),
    )
    .unwrap();
    for row in rows {
        assert!(row.fdr <= 0.05 + 2.0 * row.fdr_se, "{row:?}");
        assert_eq!(row.ap, 0.0);
    }
}

#[test]
fn two_stage_selection_is_quiet_on_nulls() {
    let toolbox = Toolbox::new(vec![kde(), ClassifierSpec::new(Family::Occ, Method::Knn)]).unwrap();
    let cfg = null_only(200, 600);
    let settings = RunSettings::default();
    let runs = 200;
    let empty = (0..runs)
        .filter(|&r| {
            let seed = derive_seed(77, r);
            let data = replication_data(&cfg, &settings, seed).unwrap();
            let opts = SelectionOptions::new(0.05, derive_seed(seed, 1));
            ptams_plus(
                &toolbox,
                &data,
                &StructureWeighting::default(),
                &[0.1, 0.5, 0.9],
                &opts,
            )
            .unwrap()
            .outcome
            .rejection
            .is_empty()
        })
        .count();
    assert!(empty * 100 >= 99 * runs as usize, "{empty}/{runs} empty");
}

#[test]
fn structure_weights_do_not_lose_power() {
    let cfg = SyntheticConfig::structured(500, 2, 3.0, 1200);
    let methods = [
        MethodSpec::new(
            "scq",
            Pipeline::Scq {
                classifier: kde(),
                weights: WeightMode::default(),
            },
        ),
        MethodSpec::new("bc", Pipeline::BcUnweighted { classifier: kde() }),
        MethodSpec::new(
            "oracle",
            Pipeline::Scq {
                classifier: kde(),
                weights: WeightMode::Oracle,
            },
        ),
    ];
    let reps = replicate(&methods, &cfg, 60, 5, &RunSettings::default()).unwrap();
    let (diff, se) = reps.paired_difference(0, 1, Metric::Ap);
    assert!(diff >= -2.0 * se, "diff {diff} se {se}");
    let rows = reps.metrics().unwrap();
    for row in &rows {
        assert!(row.fdr <= 0.05 + 2.0 * row.fdr_se, "{row:?}");
    }
}

#[test]
fn storey_is_at_least_as_liberal_as_bh() {
    let cfg = SyntheticConfig::structured(300, 2, 3.0, 900);
    let methods = [
        MethodSpec::new(
            "bh",
            Pipeline::Cfbh {
                classifier: kde(),
                storey: false,
            },
        ),
        MethodSpec::new(
            "storey",
            Pipeline::Cfbh {
                classifier: kde(),
                storey: true,
            },
        ),
    ];
    let reps = replicate(&methods, &cfg, 30, 9, &RunSettings::default()).unwrap();
    for row in &reps.outcomes {
        let (bh, storey) = (row[0].as_ref().unwrap(), row[1].as_ref().unwrap());
        assert!(storey.rejections >= bh.rejections);
    }
}
