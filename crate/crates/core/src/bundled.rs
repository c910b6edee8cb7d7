//! Assets compiled into the crate so demos, tests, and the browser build
//! work without touching the filesystem. Referenced from configs and the
//! CLI as `bundled:<name>`.

pub const FBNET_SPACE: &str = include_str!("../assets/spaces/fbnet.json");
pub const FBNET_EXTENDED_SPACE: &str = include_str!("../assets/spaces/fbnet_extended.json");
pub const TOY_TABULAR_SPACE: &str = include_str!("../assets/spaces/toy_tabular.json");
pub const TOY_SUPERNET_SPACE: &str = include_str!("../assets/spaces/toy_supernet.json");
pub const TOY_LATENCY_TABLE: &str = include_str!("../assets/tables/toy_latency.csv");
pub const REFERENCE_DEVICE_POWERS: &str = include_str!("../assets/power/reference_devices.csv");
pub const TOY_DEVICE_POWERS: &str = include_str!("../assets/power/toy_devices.csv");
pub const TOY_TABULAR_SCORES: &str = include_str!("../assets/scores/toy_tabular.json");
pub const FBNET_EXTENDED_SCORES: &str = include_str!("../assets/scores/fbnet_extended.json");
pub const TOY_TABULAR_CONFIG: &str = include_str!("../assets/configs/toy_tabular.json");
pub const TOY_SUPERNET_CONFIG: &str = include_str!("../assets/configs/toy_supernet.json");
pub const FBNET_FLOPS_CONFIG: &str = include_str!("../assets/configs/fbnet_flops.json");

/// Look up a bundled asset by its `bundled:` name (without the prefix).
pub fn get(name: &str) -> Option<&'static str> {
    Some(match name {
        "space/fbnet" => FBNET_SPACE,
        "space/fbnet-extended" => FBNET_EXTENDED_SPACE,
        "space/toy-tabular" => TOY_TABULAR_SPACE,
        "space/toy-supernet" => TOY_SUPERNET_SPACE,
        "table/toy-latency" => TOY_LATENCY_TABLE,
        "power/reference-devices" => REFERENCE_DEVICE_POWERS,
        "power/toy-devices" => TOY_DEVICE_POWERS,
        "scores/toy-tabular" => TOY_TABULAR_SCORES,
        "scores/fbnet-extended" => FBNET_EXTENDED_SCORES,
        "config/toy-tabular" => TOY_TABULAR_CONFIG,
        "config/toy-supernet" => TOY_SUPERNET_CONFIG,
        "config/fbnet-flops" => FBNET_FLOPS_CONFIG,
        _ => return None,
    })
}

pub fn names() -> &'static [&'static str] {
    &[
        "space/fbnet",
        "space/fbnet-extended",
        "space/toy-tabular",
        "space/toy-supernet",
        "table/toy-latency",
        "power/reference-devices",
        "power/toy-devices",
        "scores/toy-tabular",
        "scores/fbnet-extended",
        "config/toy-tabular",
        "config/toy-supernet",
        "config/fbnet-flops",
    ]
}
