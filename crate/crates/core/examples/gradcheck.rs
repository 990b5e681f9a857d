//! Central-difference check of a small model's gradients in double precision.
//!
//!     cargo run --release --example gradcheck

use margin_ffcl::model::{build_model, embed_graph, head_graph, Model, ModelConfig};
use margin_ffcl::numerics::{finite_difference_gradcheck, Graph, ParamSubset, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A single expression first: d/dx sum(relu(x) * x).
    let mut g: Graph<f64> = Graph::new();
    let x = g.variable(Tensor::from_vec(vec![-1.0, 0.5, 2.0]));
    let r = g.relu(x);
    let y = g.mul(r, x)?;
    let loss = g.sum(y);
    let grads = g.backward(loss)?;
    println!("d/dx sum(relu(x) * x) at [-1, 0.5, 2] = {:?}", grads.wrt(x).map(|t| t.data().to_vec()));

    let cfg = ModelConfig {
        num_blocks: 3,
        base_channels: 2,
        embedding_dim: 4,
        input_size: 16,
        seed: 5,
    };
    let model: Model<f64> = build_model(&cfg)?.cast();
    let a = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37) % 101) as f64 / 100.0);
    let b = a.map(|v| 1.0 - v);

    let report = finite_difference_gradcheck(&model.params, &ParamSubset::sampled(20), 1e-5, |g, p| {
        let xa = g.input(a.clone());
        let xb = g.input(b.clone());
        let ea = embed_graph(g, p, &model.config, xa)?;
        let eb = embed_graph(g, p, &model.config, xb)?;
        let z = head_graph(g, p, ea.final_embedding)?;
        let focal = g.binary_focal(z, true, 0.8, 3.0)?;
        let cos = g.cosine_embedding_loss(ea.final_embedding, eb.final_embedding, false)?;
        g.add(focal, cos)
    })?;
    println!(
        "model: {} coordinates, {} skipped at kinks, max relative error {:.2e} at {:?}",
        report.coordinates_checked, report.skipped_at_kinks, report.max_relative_error, report.worst
    );
    Ok(())
}
