// Scratch calibration harness. Removed before ship.

use shardmemo::bench::evaluate_routing_arm;
use shardmemo::router::{train_router, BaselineKind, TrainConfig};
use shardmemo::service::{build_router_dataset, RoutingStrategy, ShardMemoService};
use shardmemo::types::ProbeMode;
use shardmemo::workload::{generate_workload, WorkloadConfig};
use shardmemo::ServiceConfig;

#[test]
#[ignore]
fn calibrate_routing_arms() {
    let noise: f64 = std::env::var("NOISE").ok().and_then(|s| s.parse().ok()).unwrap_or(0.65);
    let config = ServiceConfig::default();
    let wconfig = WorkloadConfig {
        cluster_noise: noise,
        ..WorkloadConfig::default()
    };
    let bundle = generate_workload(&wconfig).unwrap();

    let service = ShardMemoService::new(config.clone());
    for record in &bundle.items {
        let item = record.clone().into_item(service.embedder()).unwrap();
        service.store.write_item(item).unwrap();
    }
    service.store.flush();

    let gold = bundle.gold_shard_map();
    let dataset = build_router_dataset(&service, &bundle.requests, &gold).unwrap();
    let untrained = service.router_model();
    let report = train_router(&untrained, &dataset, &TrainConfig::default()).unwrap();
    println!(
        "noise {noise}: loss[0..5] {:?} final {:.3}",
        &report.loss_curve[..5],
        report.loss_curve.last().unwrap()
    );
    let trained = report.model.clone();
    let b = 3;
    let k = 10;

    let arm = |svc: &ShardMemoService, strategy: RoutingStrategy, name: &str| {
        let stats =
            evaluate_routing_arm(svc, &bundle.requests, &gold, strategy, b, k).unwrap();
        println!(
            "{name:<12} hit {:.3} scan {:>7.2} probes {:.2}",
            stats.shard_hit, stats.mean_vec_scan, stats.mean_probes
        );
        stats
    };

    service.set_router(trained.clone());
    let topp = RoutingStrategy::Learned { mode: ProbeMode::AdaptiveTopP, masked: true };
    let full = arm(&service, topp, "full");
    let unmasked = arm(
        &service,
        RoutingStrategy::Learned { mode: ProbeMode::AdaptiveTopP, masked: false },
        "unmasked",
    );
    let cosine = arm(&service, RoutingStrategy::Baseline(BaselineKind::CosinePrototype), "cosine");

    let mut no_cost = trained.clone();
    no_cost.alpha = 0.0;
    service.set_router(no_cost);
    let alpha0 = arm(&service, topp, "alpha0");

    service.set_router(untrained.clone());
    let untr = arm(&service, topp, "untrained");

    println!("--- checks ---");
    println!("hit gap (need >= 0.05): {:.3}", full.shard_hit - cosine.shard_hit);
    println!("scan trained<=cosine: {:.2} <= {:.2} : {}", full.mean_vec_scan, cosine.mean_vec_scan, full.mean_vec_scan <= cosine.mean_vec_scan);
    println!("unmasked > full: {:.2} > {:.2} : {}", unmasked.mean_vec_scan, full.mean_vec_scan, unmasked.mean_vec_scan > full.mean_vec_scan);
    println!("alpha0 > full: {:.2} > {:.2} : {} (hit delta {:.3})", alpha0.mean_vec_scan, full.mean_vec_scan, alpha0.mean_vec_scan > full.mean_vec_scan, (alpha0.shard_hit - full.shard_hit).abs());
    println!("untrained below both: {}", untr.shard_hit < full.shard_hit && untr.shard_hit < cosine.shard_hit);
}
