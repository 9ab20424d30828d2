//! The tape: a small expression, its backward pass and a central-difference
//! check of one input gradient.

use foveate::tensor::{Graph, Tensor, Var};

type Error = Box<dyn std::error::Error>;

fn loss(x: &Tensor<f64>, w: &Tensor<f64>) -> Result<(Graph<f64>, Var, Var), Error> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let wv = g.constant(w.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.gelu(h);
    let p = g.log_softmax(h, 1)?;
    let l = g.mean(p);
    let l = g.neg(l);
    Ok((g, xv, l))
}

fn main() -> Result<(), Error> {
    let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 0.7, 1.2, 0.3, -0.9])?;
    let w = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;

    let (mut g, xv, l) = loss(&x, &w)?;
    println!("loss {:.6}", g.value(l).item());
    let grads = g.backward(l)?;
    let analytic = grads.wrt(xv).expect("x receives a gradient").data()[4];

    let h = 1e-6;
    let bump = |d: f64| -> Result<f64, Error> {
        let mut xs = x.clone();
        xs.data_mut()[4] += d;
        let (g, _, l) = loss(&xs, &w)?;
        Ok(g.value(l).item())
    };
    let numeric = (bump(h)? - bump(-h)?) / (2.0 * h);
    println!("d loss / d x[1,1]: analytic {analytic:.8}, numeric {numeric:.8}");
    Ok(())
}
