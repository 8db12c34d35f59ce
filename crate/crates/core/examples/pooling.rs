//! The four aggregation methods on a hand-written batch of hidden states,
//! with the gradient each one sends back to the time steps.
//!
//! ```text
//! cargo run --release --example pooling
//! ```

use seqvae::{aggregate, AggregationMethod, Graph, Tensor};

fn main() -> seqvae::Result<()> {
    // two rows, three steps, two hidden units; row 1 has length 2
    #[rustfmt::skip]
    let hidden = Tensor::new(vec![2, 3, 2], vec![
        0.2, -0.9,   0.7, 0.1,   -0.4, 0.5,
        -0.6, 0.3,   0.1, -0.2,   9.0, 9.0,
    ])?;
    let lengths = [3, 2];

    for method in AggregationMethod::ALL {
        let mut g = Graph::new();
        let h = g.leaf(hidden.clone());
        let pooled = aggregate(&mut g, h, &lengths, method)?;
        let total = g.sum(pooled);
        g.backward(total)?;
        println!("{method:>4}: pooled {:?}", g.value(pooled).data());
        println!("      d/dh {:?}", g.grad(h).unwrap_or(&[]));
    }
    println!("the padded step of row 1 (value 9.0) never contributes");
    Ok(())
}
