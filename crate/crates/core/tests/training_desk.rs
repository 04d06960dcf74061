use mitml::synthdata::{generate_corpus, Corpus, SynthConfig};
use mitml::training::{Method, StepLosses, TrainConfig, Trainer};
use tempfile::TempDir;

fn epoch_mean(losses: &[StepLosses], epoch: usize, f: impl Fn(&StepLosses) -> f64) -> f64 {
    let rows: Vec<f64> = losses.iter().filter(|l| l.epoch == epoch).map(f).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn ten_desk_epochs_reduce_the_loss() {
    let seeds = [0u64, 1, 2];
    let mut first = [0.0; 3];
    let mut last = [0.0; 3];
    for &seed in &seeds {
        let dir = TempDir::new().unwrap();
        generate_corpus(&SynthConfig { seed, ..SynthConfig::default() }, dir.path()).unwrap();
        let corpus = Corpus::load(dir.path()).unwrap();
        for (slot, method) in [Method::Baseline, Method::Full].into_iter().enumerate() {
            let cfg = TrainConfig { epochs: 10, method, ..TrainConfig::desk(seed) };
            let losses = Trainer::<f64>::new(cfg, &corpus).unwrap().run().unwrap();
            let ident = |l: &StepLosses| l.ce + l.tri;
            first[slot] += epoch_mean(&losses, 1, ident) / 3.0;
            last[slot] += epoch_mean(&losses, 10, ident) / 3.0;
            if method == Method::Full {
                first[2] += epoch_mean(&losses, 1, |l| l.total) / 3.0;
                last[2] += epoch_mean(&losses, 10, |l| l.total) / 3.0;
            }
        }
    }
    println!("baseline ce+tri {:.4} -> {:.4}", first[0], last[0]);
    println!("full ce+tri {:.4} -> {:.4}", first[1], last[1]);
    println!("full total {:.4} -> {:.4}", first[2], last[2]);
    assert!(last[0] < first[0]);
    assert!(last[1] < first[1]);
}
