//! Solves for the Fiedler pair with both the dense and the iterative route.

use pancut::affinity::AffinityGraph;
use pancut::spectral::{d_inner, dense_fiedler, lobpcg_fiedler, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pancut::Result<()> {
    let n = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
        for j in 0..i {
            // two loose communities
            let same = (i < n / 2) == (j < n / 2);
            let v = if same { rng.gen_range(0.3..1.0) } else { rng.gen_range(1e-5..0.2) };
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    let graph = AffinityGraph::from_weights(n, w)?;
    let dense = dense_fiedler(&graph)?;
    let iterative = lobpcg_fiedler(&graph, &SolverConfig::default())?;
    println!("dense     λ₂ = {:.12}  residual {:.2e}", dense.value, dense.residual);
    println!("iterative λ₂ = {:.12}  residual {:.2e}", iterative.value, iterative.residual);
    println!("|<z_dense, z_iter>_D| = {:.12}", d_inner(&graph, &dense.vector, &iterative.vector).abs());
    let positive = iterative.vector.iter().filter(|&&z| z > 0.0).count();
    println!("sign split: {positive} / {}", n - positive);
    Ok(())
}
