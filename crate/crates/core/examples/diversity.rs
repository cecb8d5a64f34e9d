//! Yule's Q between pairs of learners: the pairwise form on the learners'
//! own calls and the variant scored against the truth. Learners that both
//! track the truth agree more than chance even when their errors are
//! independent, which pushes the pairwise Q up.
//!
//! cargo run --release --example diversity

use rand::Rng;

use causal_stack::eval::{q_average, q_average_oracle, q_statistic};
use causal_stack::util::rng;

/// Calls of a learner with the given recall and false-positive rate.
fn learner(truth: &[bool], recall: f64, fpr: f64, r: &mut impl Rng) -> Vec<bool> {
    truth
        .iter()
        .map(|&t| r.random::<f64>() < if t { recall } else { fpr })
        .collect()
}

fn main() -> causal_stack::Result<()> {
    let mut r = rng(5);
    let truth: Vec<bool> = (0..2000).map(|_| r.random::<f64>() < 0.1).collect();

    let independent: Vec<Vec<bool>> = (0..3).map(|_| learner(&truth, 0.35, 0.07, &mut r)).collect();
    let base = learner(&truth, 0.35, 0.07, &mut r);
    let correlated: Vec<Vec<bool>> = (0..3)
        .map(|_| base.iter().map(|&b| if r.random::<f64>() < 0.9 { b } else { !b }).collect())
        .collect();
    let noise: Vec<Vec<bool>> = (0..3).map(|_| learner(&truth, 0.1, 0.1, &mut r)).collect();

    println!("{:<24} {:>8} {:>8}", "learners", "Q_av", "oracle");
    for (name, calls) in [
        ("independent errors", &independent),
        ("shared errors", &correlated),
        ("uninformative", &noise),
    ] {
        println!("{name:<24} {:>8.3} {:>8.3}", q_average(calls)?, q_average_oracle(calls, &truth)?);
    }
    let q = q_statistic(&independent[0], &independent[1])?;
    println!("first independent pair: {q:?}");
    Ok(())
}
