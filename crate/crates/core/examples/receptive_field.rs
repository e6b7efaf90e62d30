//! Receptive field, stride and parameter count of the two shipped networks.

use calcseg::cli::rf_report;
use calcseg::network::{Network, NetworkConfig};

fn main() -> calcseg::Result<()> {
    for (name, cfg) in [
        ("reference", NetworkConfig::reference()),
        ("compact", NetworkConfig::compact()),
    ] {
        let net = Network::<f32>::build(&cfg, 0)?;
        let rf = net.receptive_field();
        println!("{name}");
        println!("  receptive field (H W D)  {rf}");
        println!("  total stride (D H W)     {:?}", net.total_stride());
        println!("  weighted layers          {}", net.weighted_layers());
        println!("  parameters               {}", net.parameter_count());
        // Output extents for the smallest valid inputs and the default patch.
        for line in rf_report(&cfg, None)?.lines().skip(1) {
            println!("  {line}");
        }
    }
    Ok(())
}
