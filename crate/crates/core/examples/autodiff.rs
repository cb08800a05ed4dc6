//! Fits `y = 2x + 1` with the reverse-mode tape and AdamW, then checks one
//! gradient against a central finite difference.

use graphstitch::tensor::{AdamW, Op, Tape, Tensor};

fn loss(w: &Tensor, b: &Tensor, x: &Tensor, y: &Tensor) -> graphstitch::Result<(f64, Vec<f32>, Vec<f32>)> {
    let mut tape = Tape::new();
    let (wv, bv) = (tape.leaf(w), tape.leaf(b));
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let pred = tape.apply(Op::Linear, &[xv, wv, bv])?;
    let l = tape.apply(Op::Mse, &[pred, yv])?;
    let value = tape.value(l).data()[0] as f64;
    let grads = tape.backward(l)?;
    Ok((value, grads.get(wv).unwrap_or_default().to_vec(), grads.get(bv).unwrap_or_default().to_vec()))
}

fn main() -> graphstitch::Result<()> {
    let x = Tensor::from_fn(&[16, 1], |i| i as f32 / 8.0 - 1.0);
    let y = Tensor::from_fn(&[16, 1], |i| 2.0 * (i as f32 / 8.0 - 1.0) + 1.0);
    let mut w = Tensor::zeros(&[1, 1]).with_requires_grad(true);
    let mut b = Tensor::zeros(&[1]).with_requires_grad(true);

    let (_, gw, _) = loss(&w, &b, &x, &y)?;
    let h = 1e-3;
    let shifted = |d: f32| Tensor::new(vec![1, 1], vec![d]).map(|t| t.with_requires_grad(true));
    let numeric = (loss(&shifted(h)?, &b, &x, &y)?.0 - loss(&shifted(-h)?, &b, &x, &y)?.0) / (2.0 * h as f64);
    println!("dL/dw analytic {:.5}, numeric {numeric:.5}", gw[0]);

    let mut opt = AdamW::new(0.05, 0.0);
    for step in 0..400 {
        let (l, gw, gb) = loss(&w, &b, &x, &y)?;
        w.zero_grad();
        b.zero_grad();
        w.accumulate_grad(&gw)?;
        b.accumulate_grad(&gb)?;
        opt.step([("w".to_string(), &mut w), ("b".to_string(), &mut b)])?;
        if step % 100 == 0 {
            println!("step {step:3}: loss {l:.5}");
        }
    }
    println!("fitted w = {:.3}, b = {:.3}", w.data()[0], b.data()[0]);
    Ok(())
}
