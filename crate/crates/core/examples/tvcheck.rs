use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triage_router::sim::panel::conditional_correctness_sampler;

fn main() {
    for seed in [606u64, 607, 608, 609, 610] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut max_tv = 0.0f64;
        for _setting in 0..20 {
            let j = 1 + (rng.random_range(0..8usize));
            let phi: Vec<f64> = (0..j).map(|_| rng.random_range(0.85..0.995)).collect();
            let k_min = rng.random_range(0..=j);
            let patterns = 1usize << j;
            let mut law = vec![0.0f64; patterns];
            let mut z = 0.0;
            for pat in 0..patterns {
                let mut p = 1.0;
                let mut ones = 0usize;
                for (jj, &pj) in phi.iter().enumerate() {
                    if pat >> jj & 1 == 1 { p *= pj; ones += 1; } else { p *= 1.0 - pj; }
                }
                if ones >= k_min { law[pat] = p; z += p; }
            }
            for v in law.iter_mut() { *v /= z; }
            let n = 100_000usize;
            let mut counts = vec![0usize; patterns];
            for _ in 0..n {
                let c = conditional_correctness_sampler(&phi, k_min, &mut rng).unwrap();
                let mut pat = 0usize;
                for (jj, &cv) in c.iter().enumerate() { pat |= (cv as usize) << jj; }
                counts[pat] += 1;
            }
            let tv: f64 = law.iter().enumerate().map(|(pat, &p)| (p - counts[pat] as f64 / n as f64).abs()).sum::<f64>() / 2.0;
            max_tv = max_tv.max(tv);
        }
        println!("seed {seed}: max TV = {max_tv:.5}");
    }
}
