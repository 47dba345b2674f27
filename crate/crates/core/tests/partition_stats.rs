use hyperfed::data::dirichlet_partition;
use hyperfed::numcore::Rng;

fn class_counts(labels: &[usize], idx: &[usize], classes: usize) -> Vec<usize> {
    let mut c = vec![0; classes];
    for &i in idx {
        c[labels[i]] += 1;
    }
    c
}

#[test]
fn huge_alpha_is_nearly_uniform() {
    let classes = 7;
    let labels: Vec<usize> = (0..classes * 1000).map(|i| i % classes).collect();
    let p = dirichlet_partition(&labels, classes, 10, 1e6, &mut Rng::new(4)).unwrap();
    for (tr, te) in p.train.iter().zip(&p.test) {
        let all: Vec<usize> = tr.iter().chain(te).copied().collect();
        let counts = class_counts(&labels, &all, classes);
        let total: usize = counts.iter().sum();
        for c in counts {
            let share = c as f64 / total as f64;
            assert!((share - 1.0 / classes as f64).abs() <= 0.05 / classes as f64 + 1e-12, "share {share}");
        }
    }
}

#[test]
fn small_alpha_concentrates_some_client() {
    let classes = 7;
    let labels: Vec<usize> = (0..classes * 300).map(|i| i % classes).collect();
    for seed in 0..5 {
        let p = dirichlet_partition(&labels, classes, 10, 0.1, &mut Rng::new(seed)).unwrap();
        let dominant = p
            .train
            .iter()
            .zip(&p.test)
            .map(|(tr, te)| {
                let all: Vec<usize> = tr.iter().chain(te).copied().collect();
                let counts = class_counts(&labels, &all, classes);
                *counts.iter().max().unwrap() as f64 / all.len() as f64
            })
            .fold(0.0, f64::max);
        assert!(dominant >= 0.7, "seed {seed}: largest single-class share {dominant}");
    }
}
