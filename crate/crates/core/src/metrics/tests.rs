use proptest::prelude::*;

use super::*;

#[test]
fn mean_accuracy_parameter_study_row() {
    let m = AccuracyMatrix::from_rows(
        vec![vec![79.81], vec![0.0, 0.0], vec![0.0; 3], vec![0.0; 4]],
        vec![79.81, 77.14, 71.43, 67.77],
    )
    .unwrap();
    let v = mean_accuracy(&m).unwrap();
    assert!((v - 74.04).abs() <= 0.005, "{v}");
    assert!((v - 74.0375).abs() < 1e-12);
}

#[test]
fn mean_accuracy_trivial_cases() {
    let m = AccuracyMatrix::from_rows(vec![vec![42.0]], vec![42.0]).unwrap();
    assert_eq!(mean_accuracy(&m).unwrap(), 42.0);
    let m = AccuracyMatrix::from_rows(vec![vec![60.0], vec![60.0, 60.0]], vec![60.0, 60.0]).unwrap();
    assert_eq!(mean_accuracy(&m).unwrap(), 60.0);
    assert!(mean_accuracy(&AccuracyMatrix::new()).is_err());
}

#[test]
fn forgetting_examples() {
    let m = AccuracyMatrix::from_rows(vec![vec![80.0], vec![70.0, 90.0]], vec![80.0, 80.0]).unwrap();
    assert_eq!(average_forgetting(&m), Some(10.0));

    let m = AccuracyMatrix::from_rows(
        vec![vec![90.0], vec![80.0, 85.0], vec![70.0, 75.0, 60.0]],
        vec![90.0, 82.5, 68.3],
    )
    .unwrap();
    assert_eq!(average_forgetting(&m), Some(12.5));

    let m = AccuracyMatrix::from_rows(vec![vec![50.0], vec![50.0, 40.0], vec![50.0, 40.0, 30.0]], vec![50.0, 45.0, 40.0]).unwrap();
    assert_eq!(average_forgetting(&m), Some(0.0));

    let m = AccuracyMatrix::from_rows(vec![vec![50.0]], vec![50.0]).unwrap();
    assert_eq!(average_forgetting(&m), None);
}

#[test]
fn improving_tasks_do_not_count_as_negative_forgetting() {
    let m = AccuracyMatrix::from_rows(vec![vec![50.0], vec![70.0, 40.0]], vec![50.0, 55.0]).unwrap();
    assert_eq!(average_forgetting(&m), Some(0.0));
}

#[test]
fn matrix_shape_and_range_contracts() {
    let mut m = AccuracyMatrix::new();
    assert!(m.push_step(50.0, vec![50.0, 50.0]).is_err());
    assert!(m.push_step(150.0, vec![50.0]).is_err());
    m.push_step(50.0, vec![50.0]).unwrap();
    assert_eq!(m.get(0, 0), Some(50.0));
    assert_eq!(m.get(0, 1), None);
}

#[test]
fn score_examples() {
    let layout = TaskLayout::new(vec![2, 2]).unwrap();
    let targets = [0, 1, 2, 3, 0, 1, 2, 3];
    let (all, per) = score(&targets, &targets, &layout).unwrap();
    assert_eq!((all, per), (100.0, vec![100.0, 100.0]));

    let constant = [0; 8];
    let (all, per) = score(&constant, &targets, &layout).unwrap();
    assert_eq!((all, per), (25.0, vec![50.0, 0.0]));

    assert!(score(&[0], &[4], &layout).is_err());
    assert!(score(&[0, 1], &[0, 1], &layout).is_err());
}

proptest! {
    #[test]
    fn per_task_accuracies_recompose_overall(
        bounds in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let layout = TaskLayout::new(bounds.clone()).unwrap();
        let total = layout.total();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut targets: Vec<usize> = (0..total).collect();
        targets.extend((0..30).map(|_| rng.random_range(0..total)));
        let preds: Vec<usize> = targets.iter().map(|_| rng.random_range(0..total)).collect();
        let (all, per) = score(&preds, &targets, &layout).unwrap();
        let mut weighted = 0.0;
        for (b, acc) in per.iter().enumerate() {
            let n = targets.iter().filter(|&&y| layout.block_of(y) == Some(b)).count();
            weighted += acc * n as f64;
        }
        prop_assert!((weighted / targets.len() as f64 - all).abs() < 1e-9);
    }

    #[test]
    fn forgetting_is_non_negative_and_label_free(rows in prop::collection::vec(prop::collection::vec(0.0f64..100.0, 4), 2..5)) {
        let per_task: Vec<Vec<f64>> = rows.iter().enumerate().map(|(t, r)| r[..=t.min(3)].to_vec()).collect();
        let per_task: Vec<Vec<f64>> = per_task.into_iter().take(4).collect();
        let overall = per_task.iter().map(|r| r[0]).collect();
        let m = AccuracyMatrix::from_rows(per_task, overall).unwrap();
        prop_assert!(average_forgetting(&m).unwrap() >= 0.0);
    }
}

#[test]
fn argmax_ties_go_low() {
    let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 2.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![1, 0]);
}

fn feats(rows: &[[f64; 2]]) -> Tensor {
    Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn nearest_mean_examples() {
    // a query equal to a lone exemplar picks that class
    let ex = feats(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]]);
    let means = class_means(&ex, &[0, 1, 2], 3).unwrap();
    assert_eq!(nearest_mean(&means, &feats(&[[0.0, 1.0], [-1.0, 0.2]])), vec![1, 2]);

    // equidistant query goes to the lower class
    let means = class_means(&feats(&[[1.0, 0.0], [0.0, 1.0]]), &[1, 0], 2).unwrap();
    assert_eq!(nearest_mean(&means, &feats(&[[1.0, 1.0]])), vec![0]);

    // scaling features uniformly changes nothing
    let q = feats(&[[0.3, 0.9], [2.0, -0.1], [-0.5, -0.5]]);
    let mut q2 = q.clone();
    q2.data_mut().iter_mut().for_each(|v| *v *= 7.5);
    let means = class_means(&ex, &[0, 1, 2], 3).unwrap();
    assert_eq!(nearest_mean(&means, &q), nearest_mean(&means, &q2));

    assert!(class_means(&ex, &[0, 0, 2], 3).is_err());
}

#[test]
fn nearest_mean_matches_distance_table() {
    let ex = feats(&[[1.0, 0.0], [3.0, 1.0], [0.0, 2.0], [-1.0, -1.0], [-2.0, -0.5]]);
    let targets = [0, 0, 1, 2, 2];
    let queries = feats(&[[2.0, 2.0], [0.1, 1.0], [-1.0, 0.1], [1.0, -1.0]]);
    let means = class_means(&ex, &targets, 3).unwrap();
    // class means by hand: (2, 0.5), (0, 2), (-1.5, -0.75), each then normalized
    let raw: [[f64; 2]; 3] = [[2.0, 0.5], [0.0, 2.0], [-1.5, -0.75]];
    let hand: Vec<Vec<f64>> = raw
        .iter()
        .map(|m| {
            let n = (m[0] * m[0] + m[1] * m[1]).sqrt();
            vec![m[0] / n, m[1] / n]
        })
        .collect();
    for (m, h) in means.iter().zip(&hand) {
        assert!((m[0] - h[0]).abs() < 1e-15 && (m[1] - h[1]).abs() < 1e-15);
    }
    let mut want = Vec::new();
    for i in 0..4 {
        let q = queries.row(i);
        let n = (q[0] * q[0] + q[1] * q[1]).sqrt();
        let table: Vec<f64> = hand.iter().map(|h| (h[0] - q[0] / n).powi(2) + (h[1] - q[1] / n).powi(2)).collect();
        want.push((0..3).min_by(|&a, &b| table[a].partial_cmp(&table[b]).unwrap()).unwrap());
    }
    assert_eq!(nearest_mean(&means, &queries), want);
    assert_eq!(want, vec![0, 1, 2, 0]);
}
