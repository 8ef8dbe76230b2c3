//! The linear noise schedule, forward noising, and DDIM inversion with an
//! oracle noise predictor that knows the clean latent.

use talkdiff::diffcore::{ddim_sample_from, forward_diffuse, DiffusionSchedule, EpsPredictor, ScheduleConfig};
use talkdiff::numcore::{normal_tensor, seeded_rng, Tensor};

struct Oracle<'a> {
    schedule: &'a DiffusionSchedule,
    z0: &'a Tensor,
}

impl EpsPredictor for Oracle<'_> {
    fn predict(&self, z: &Tensor, d: usize) -> talkdiff::Result<Tensor> {
        let ab = self.schedule.alpha_bar(d);
        let data = z.data().iter().zip(self.z0.data()).map(|(z, x)| (z - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect();
        Tensor::new(z.shape(), data)
    }
}

fn main() -> talkdiff::Result<()> {
    let schedule = DiffusionSchedule::from_config(&ScheduleConfig::default())?;
    for d in [1, 100, 500, 900, 1000] {
        println!("alpha_bar[{d}] = {:.6e}", schedule.alpha_bar(d));
    }
    let mut rng = seeded_rng(0, 0);
    let z0 = normal_tensor(&[1, 3, 8, 8], &mut rng);
    let eps = normal_tensor(z0.shape(), &mut rng);
    let z_t = forward_diffuse(&schedule, &z0, 1000, &eps)?;
    for steps in [10, 50, 200] {
        let out = ddim_sample_from(&schedule, &Oracle { schedule: &schedule, z0: &z0 }, z_t.clone(), steps, |_, _| {})?;
        let err = out.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("DDIM {steps:>3} steps: max |z0 - recovered| = {err:.2e}");
    }
    Ok(())
}
