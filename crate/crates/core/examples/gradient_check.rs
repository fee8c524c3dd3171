//! Reverse-mode gradients of a small classifier against central differences.
//!
//! `cargo run --release --example gradient_check`

use pulseid::tensor::{finite_diff, grad, max_rel_error, ParamStore, Tape, Tensor};

fn loss(tape: &mut Tape, p: &ParamStore, x: &Tensor) -> pulseid::Result<pulseid::tensor::Var> {
    let xv = tape.constant(x.clone())?;
    let (w, b) = (tape.param(p, "w")?, tape.param(p, "b")?);
    let h = tape.dense(xv, w, b)?;
    let h = tape.tanh(h)?;
    let y = tape.softmax(h)?;
    tape.cross_entropy(y, 2)
}

fn main() -> pulseid::Result<()> {
    let mut p = ParamStore::new(7);
    p.init_glorot("w", &[5, 4], 5, 4)?;
    p.init_const("b", &[4], 0.05)?;
    let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect())?;

    let mut tape = Tape::new();
    let l = loss(&mut tape, &p, &x)?;
    let analytic = grad(&tape, l, &p)?;
    let numeric = finite_diff(
        |q| {
            let mut t = Tape::new();
            let l = loss(&mut t, q, &x)?;
            Ok(t.value(l).item())
        },
        &p,
        1e-5,
    )?;
    println!("loss {:.6}", tape.value(l).item());
    println!("max relative gradient error {:.2e}", max_rel_error(&analytic, &numeric));
    Ok(())
}
