use dex_tts::pipeline::{DexModel, ModelConfig};
use std::collections::BTreeMap;

#[test]
#[ignore]
fn print_toy_parameter_breakdown() {
    let model = DexModel::new(ModelConfig::toy()).unwrap();
    let mut by_prefix: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in model.store.iter() {
        let prefix = name.split('.').next().unwrap().to_string();
        *by_prefix.entry(prefix).or_insert(0) += t.numel();
    }
    for (p, n) in &by_prefix {
        println!("{p:12} {n}");
    }
    println!("total: {}", model.num_parameters());
}
