//! Recording a small computation on the tape and reading its gradients.

use calcseg::tensor_core::{Tape, Tensor};

fn main() -> calcseg::Result<()> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(
        &[1, 1, 3, 3],
        (0..9).map(f64::from).collect(),
    )?);
    let w = tape.leaf(Tensor::from_vec(
        &[1, 1, 1, 2, 2],
        vec![0.5, -1.0, 0.25, 2.0],
    )?);

    let y = tape.conv3d_valid(x, w, None, [1, 1, 1])?;
    let r = tape.relu(y)?;
    let loss = tape.sum_all(r)?;
    let grads = tape.backward(loss)?;

    println!("conv output {:?}", tape.value(y).data());
    println!("loss {}", tape.value(loss).item()?);
    println!("d loss / d x {:?}", grads.get(x).expect("leaf").data());
    println!("d loss / d w {:?}", grads.get(w).expect("leaf").data());
    Ok(())
}
