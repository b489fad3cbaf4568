use clap::Subcommand;
use serde::Serialize;

use saga_core::exec::Execution;
use saga_core::guards::{Guard, Guards};
use saga_core::harness::{self, CapacityModel, OverheadModel, Scenario};
use saga_core::transport::RttDistribution;

use crate::error::{CliError, EXIT_HARNESS};
use crate::Context;

/// Combined token generation, decryption and validation cost on the
/// reference hardware, in milliseconds.
const REFERENCE_TOKEN_LIFECYCLE_MS: f64 = 2.73;

#[derive(Subcommand, Debug)]
pub enum HarnessCommand {
    /// Run one attack scenario (A1..A8).
    Attack {
        scenario: Scenario,
        /// Run with this guard disabled.
        #[arg(long, value_parser = parse_guard)]
        disable_guard: Option<Guard>,
    },
    /// Run all attack scenarios.
    Attacks {
        /// Also disable each guard in turn and report which scenarios fail.
        #[arg(long)]
        mutation: bool,
    },
    /// Protocol overhead: model, Monte Carlo and full-stack cycle count.
    Overhead {
        #[arg(long, default_value_t = 10)]
        qmax: u32,
        #[arg(long, default_value_t = 100)]
        m: u32,
        /// Fixed RTT in ms, or a distribution such as `20:1,50:2,120:1`
        /// (ms:weight).
        #[arg(long, default_value = "50", value_parser = parse_rtt)]
        rtt: RttDistribution,
        #[arg(long, default_value_t = 7.0)]
        t_crypto_ms: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also time the full stack with injected RTT (not reproducible).
        #[arg(long)]
        measure: bool,
    },
    /// Number of agents a Provider can keep supplied with tokens.
    Capacity {
        #[arg(long, default_value_t = 212_000.0)]
        throughput_per_minute: f64,
        #[arg(long, default_value_t = 86_400.0)]
        lifetime_seconds: f64,
        /// Use contact-resolution throughput measured on this host.
        #[arg(long)]
        measure: bool,
    },
    /// Time the token operations on this host.
    Costs {
        #[arg(long, default_value_t = 200)]
        iterations: u32,
    },
}

fn parse_guard(s: &str) -> Result<Guard, String> {
    Guard::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| {
        let names: Vec<_> = Guard::ALL.iter().map(|g| g.name()).collect();
        format!("unknown guard {s:?} (one of {})", names.join(", "))
    })
}

fn parse_rtt(s: &str) -> Result<RttDistribution, String> {
    if let Ok(ms) = s.parse::<f64>() {
        return if ms >= 0.0 { Ok(RttDistribution::fixed(ms)) } else { Err("negative RTT".into()) };
    }
    let points = s
        .split(',')
        .map(|part| {
            let (ms, weight) = part.split_once(':').ok_or_else(|| format!("bad RTT point {part:?}"))?;
            Ok((
                ms.trim().parse::<f64>().map_err(|e| e.to_string())?,
                weight.trim().parse::<f64>().map_err(|e| e.to_string())?,
            ))
        })
        .collect::<Result<Vec<_>, String>>()?;
    RttDistribution::new(points).map_err(|e| e.to_string())
}

pub fn run(ctx: &Context, command: HarnessCommand) -> Result<(), CliError> {
    match command {
        HarnessCommand::Attack {
            scenario,
            disable_guard,
        } => {
            let guards = disable_guard.map_or_else(Guards::all, Guards::without);
            let report = harness::run_attack(scenario, guards);
            print_report(ctx, &report);
            if !report.pass {
                return Err(CliError::new(EXIT_HARNESS, format!("{scenario} was not stopped where expected")));
            }
            Ok(())
        }
        HarnessCommand::Attacks { mutation } => {
            let reports = harness::run_all(Guards::all());
            for r in &reports {
                print_report(ctx, r);
            }
            let mut failed = reports.iter().filter(|r| !r.pass).count();
            if mutation {
                for row in harness::mutation_matrix() {
                    ctx.emit(&row, || {
                        format!(
                            "without {:<20} failing {:?} (expected {:?}) {}",
                            row.disabled_guard,
                            row.actual_failures,
                            row.expected_failures,
                            if row.pass { "ok" } else { "MISMATCH" }
                        )
                    });
                    failed += usize::from(!row.pass);
                }
            }
            if failed > 0 {
                return Err(CliError::new(EXIT_HARNESS, format!("{failed} expectations not met")));
            }
            Ok(())
        }
        HarnessCommand::Overhead {
            qmax,
            m,
            rtt,
            t_crypto_ms,
            trials,
            seed,
            measure,
        } => overhead(ctx, qmax, m, rtt, t_crypto_ms, trials, seed, measure),
        HarnessCommand::Capacity {
            throughput_per_minute,
            lifetime_seconds,
            measure,
        } => {
            if lifetime_seconds.is_nan() || throughput_per_minute.is_nan() || lifetime_seconds <= 0.0 || throughput_per_minute <= 0.0 {
                return Err(CliError::failure("throughput and lifetime must be positive"));
            }
            let throughput_per_minute = if measure {
                harness::measure_resolve_throughput(8, 250, Execution::Parallel).map_err(CliError::failure)?
            } else {
                throughput_per_minute
            };
            let model = CapacityModel {
                throughput_per_minute,
                lifetime_seconds,
            };
            #[derive(Serialize)]
            struct Out {
                #[serde(flatten)]
                model: CapacityModel,
                measured: bool,
                agents: f64,
            }
            let out = Out {
                model,
                measured: measure,
                agents: harness::capacity(&model),
            };
            ctx.emit(&out, || {
                format!(
                    "{:.0} resolutions/min x {:.0} min = {:.3e} agents",
                    throughput_per_minute,
                    lifetime_seconds / 60.0,
                    out.agents
                )
            });
            Ok(())
        }
        HarnessCommand::Costs { iterations } => {
            let costs = harness::measure_crypto_costs(iterations, 10);
            #[derive(Serialize)]
            struct Out {
                #[serde(flatten)]
                costs: harness::CryptoCosts,
                token_lifecycle_ms: f64,
                reference_ms: f64,
                within_magnitude: bool,
            }
            let total = costs.token_lifecycle_ms();
            let out = Out {
                costs,
                token_lifecycle_ms: total,
                reference_ms: REFERENCE_TOKEN_LIFECYCLE_MS,
                within_magnitude: harness::within_magnitude(total, REFERENCE_TOKEN_LIFECYCLE_MS),
            };
            ctx.emit(&out, || {
                format!(
                    "token generation {:.3} ms, decryption {:.3} ms, validation {:.3}/{:.3} ms, total {:.3} ms\n\
                     keypair {:.3} ms, agent registration prep {:.3} ms",
                    costs.token_generation_ms,
                    costs.token_decryption_ms,
                    costs.token_validation_initiator_ms,
                    costs.token_validation_receiver_ms,
                    total,
                    costs.keypair_generation_ms,
                    costs.agent_registration_prep_ms
                )
            });
            Ok(())
        }
    }
}

fn print_report(ctx: &Context, r: &harness::AttackReport) {
    ctx.emit(r, || {
        let at = r.detected_at_step.as_deref().unwrap_or("not detected");
        let mut line = format!(
            "{} {}  {at} (expected {})",
            r.scenario,
            if r.pass { "pass" } else { "FAIL" },
            r.expected_step
        );
        if let (Some(check), Some(code)) = (&r.check, &r.error_code) {
            line.push_str(&format!(" [{check}: {code}]"));
        }
        if let (Some(n), Some(q)) = (r.requests_accepted, r.q_max) {
            line.push_str(&format!(" accepted {n} of quota {q}"));
        }
        if let Some(note) = &r.note {
            line.push_str(&format!(" ({note})"));
        }
        line
    });
}

#[allow(clippy::too_many_arguments)]
fn overhead(
    ctx: &Context,
    q_max: u32,
    m: u32,
    rtt: RttDistribution,
    t_crypto_ms: f64,
    trials: usize,
    seed: u64,
    measure: bool,
) -> Result<(), CliError> {
    if q_max == 0 || m == 0 {
        return Err(CliError::failure("--qmax and --m must be at least 1"));
    }
    let model = OverheadModel {
        rtt: rtt.clone(),
        t_crypto_ms,
        q_max,
        m,
    };
    let analytic = harness::protocol_overhead(&model);
    let mut samples = harness::simulate_overhead(&model, trials.max(1), seed, Execution::Parallel);
    samples.sort_by(f64::total_cmp);
    let pct = |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize];
    let stack = harness::measured_overhead(q_max, m, 0.0, 0.0).map_err(CliError::failure)?;

    #[derive(Serialize)]
    struct MonteCarlo {
        trials: usize,
        seed: u64,
        mean_ms: f64,
        p05_ms: f64,
        p95_ms: f64,
    }
    #[derive(Serialize)]
    struct Out {
        model: OverheadModel,
        analytic: harness::Overhead,
        monte_carlo: MonteCarlo,
        provider_cycles: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        measured: Option<harness::MeasuredOverhead>,
    }
    let measured = if measure {
        let t_host = harness::calibrate_t_crypto(20).map_err(CliError::failure)?;
        Some(harness::measured_overhead(q_max, m, rtt.mean(), t_host).map_err(CliError::failure)?)
    } else {
        None
    };
    let out = Out {
        monte_carlo: MonteCarlo {
            trials: samples.len(),
            seed,
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
            p05_ms: pct(0.05),
            p95_ms: pct(0.95),
        },
        model,
        analytic,
        provider_cycles: stack.provider_cycles,
        measured,
    };
    ctx.emit(&out, || {
        let mut s = format!(
            "q_max {q_max}, m {m}: {} provider cycles (full stack), model {:.2} ms total, {:.3} ms per request\n\
             Monte Carlo over {} trials: mean {:.2} ms, p05 {:.2} ms, p95 {:.2} ms",
            out.provider_cycles,
            analytic.total_ms,
            analytic.amortized_ms,
            out.monte_carlo.trials,
            out.monte_carlo.mean_ms,
            out.monte_carlo.p05_ms,
            out.monte_carlo.p95_ms
        );
        if let Some(x) = &out.measured {
            s.push_str(&format!(
                "\nmeasured {:.2} ms total ({:.3} ms per request), predicted {:.2} ms with host t_crypto {:.2} ms",
                x.total_ms, x.amortized_ms, x.predicted_total_ms, x.host_t_crypto_ms
            ));
        }
        s
    });
    if stack.provider_cycles != stack.expected_cycles {
        return Err(CliError::new(
            EXIT_HARNESS,
            format!("{} provider cycles, expected {}", stack.provider_cycles, stack.expected_cycles),
        ));
    }
    Ok(())
}
