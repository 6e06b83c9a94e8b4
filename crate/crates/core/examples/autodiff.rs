//! Reverse-mode gradients on the tape, checked against central differences.
use lieflow::ad::{
    check_gradients, value_and_grad, AdError, GradCheckOptions, ParamGroup, ParamStore, Tensor,
};

fn main() {
    let mut store = ParamStore::new();
    let w = store
        .add(
            "w",
            ParamGroup::Motion,
            Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25]]),
        )
        .unwrap();
    let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5]]);

    let loss = value_and_grad(&mut store, |tape| {
        let xv = tape.constant(x.clone());
        let wv = tape.param(w);
        let y = tape.matmul(xv, wv);
        let y = tape.sin(y);
        Ok::<_, AdError>(tape.mean(y))
    })
    .unwrap();
    println!("loss {loss:.6}, dL/dw = {:?}", store.grad(w).data());

    let report = check_gradients(&store, &GradCheckOptions::default(), |tape| {
        let xv = tape.constant(x.clone());
        let wv = tape.param(w);
        let y = tape.matmul(xv, wv);
        let y = tape.sin(y);
        tape.mean(y)
    });
    println!(
        "max relative error {:.2e} over {} scalars",
        report.max_rel_err, report.checked
    );
}
