//! Fixtures for the benchmarks in benches/.

use flownet::scenario::{Built, ControlSpec, Scenario, StorageKind, Variant};

/// The example network under `control`, finite or infinite storage, with
/// every disruption switched on.
pub fn example(control: ControlSpec, finite: bool) -> Built {
    let variant = Variant {
        storage: if finite {
            StorageKind::Finite
        } else {
            StorageKind::Infinite
        },
        ..Variant::default()
    };
    Scenario::example7()
        .with_variant(variant)
        .with_control(control)
        .build()
        .expect("example builds")
}

/// A mid-range state of the seven-link example.
pub const STATE: [f64; 7] = [0.8, 0.3, 0.2, 0.1, 0.4, 0.6, 0.3];
