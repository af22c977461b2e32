//! Synthetic weather drivers, a first-order stream temperature model and
//! perturbed "observations" derived from it.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Features, Sample};

pub const RAINFALL: &str = "rainfall";
pub const AIR_TEMPERATURE: &str = "air_temperature";
pub const SOLAR_RADIATION: &str = "solar_radiation";
pub const CLOUD_COVER: &str = "cloud_cover";
pub const GROUNDWATER_TEMPERATURE: &str = "groundwater_temperature";
pub const SUBSURFACE_TEMPERATURE: &str = "subsurface_temperature";
pub const POTENTIAL_EVAPOTRANSPIRATION: &str = "potential_evapotranspiration";

pub const METEOROLOGICAL: [&str; 3] = [RAINFALL, AIR_TEMPERATURE, SOLAR_RADIATION];
pub const ADDITIONAL: [&str; 4] =
    [CLOUD_COVER, GROUNDWATER_TEMPERATURE, SUBSURFACE_TEMPERATURE, POTENTIAL_EVAPOTRANSPIRATION];

pub fn feature_schema() -> Vec<String> {
    METEOROLOGICAL.iter().chain(ADDITIONAL.iter()).map(|s| s.to_string()).collect()
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("missing driver '{feature}' for site {site} on {date}")]
    MissingDriver { feature: String, site: String, date: NaiveDate },
    #[error("missing simulated label for site {site} on {date}")]
    MissingLabel { site: String, date: NaiveDate },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Relaxation rate per day.
    pub k: f64,
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub initial_temp: f64,
    pub floor: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { k: 0.2, a0: 2.0, a1: 0.9, a2: 0.01, a3: -1.5, initial_temp: 4.0, floor: 0.0 }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let all = [self.k, self.a0, self.a1, self.a2, self.a3, self.initial_temp, self.floor];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Argument("simulator parameters must be finite".into()));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(SimError::Argument(format!("relaxation rate k={} outside (0, 1]", self.k)));
        }
        Ok(())
    }

    pub fn equilibrium(&self, air: f64, solar: f64, cloud: f64) -> f64 {
        self.a0 + self.a1 * air + self.a2 * solar + self.a3 * cloud
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeatherGenParams {
    pub start_date: NaiveDate,
    pub air_mean: f64,
    pub air_amplitude: f64,
    /// Day of year of the seasonal air temperature peak.
    pub air_peak_day: f64,
    pub air_noise_sd: f64,
    pub air_noise_rho: f64,
    pub solar_max: f64,
    /// Fractional winter reduction of clear-sky radiation.
    pub solar_seasonal_depth: f64,
    pub rain_rate: f64,
    pub rain_scale: f64,
    pub cloud_mean: f64,
    pub cloud_spread: f64,
    pub cloud_persistence: f64,
    pub groundwater_amplitude: f64,
    pub groundwater_lag_days: f64,
    pub groundwater_noise_sd: f64,
    pub subsurface_rate: f64,
    /// Standard deviation of the per-site air temperature offset.
    pub site_air_offset_sd: f64,
    /// Standard deviation of the per-site relative solar scale.
    pub site_solar_scale_sd: f64,
    pub seed: u64,
}

impl Default for WeatherGenParams {
    fn default() -> Self {
        Self {
            start_date: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            air_mean: 11.0,
            air_amplitude: 12.0,
            air_peak_day: 200.0,
            air_noise_sd: 3.0,
            air_noise_rho: 0.7,
            solar_max: 320.0,
            solar_seasonal_depth: 0.65,
            rain_rate: 0.35,
            rain_scale: 6.0,
            cloud_mean: 0.5,
            cloud_spread: 1.6,
            cloud_persistence: 0.5,
            groundwater_amplitude: 3.0,
            groundwater_lag_days: 60.0,
            groundwater_noise_sd: 0.2,
            subsurface_rate: 0.15,
            site_air_offset_sd: 1.5,
            site_solar_scale_sd: 0.08,
            seed: 0,
        }
    }
}

impl WeatherGenParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let amplitudes = [
            ("air_amplitude", self.air_amplitude),
            ("air_noise_sd", self.air_noise_sd),
            ("solar_max", self.solar_max),
            ("rain_scale", self.rain_scale),
            ("cloud_spread", self.cloud_spread),
            ("groundwater_amplitude", self.groundwater_amplitude),
            ("groundwater_noise_sd", self.groundwater_noise_sd),
            ("site_air_offset_sd", self.site_air_offset_sd),
            ("site_solar_scale_sd", self.site_solar_scale_sd),
        ];
        for (name, v) in amplitudes {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Argument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        let unit = [
            ("rain_rate", self.rain_rate),
            ("cloud_mean", self.cloud_mean),
            ("cloud_persistence", self.cloud_persistence),
            ("air_noise_rho", self.air_noise_rho),
            ("solar_seasonal_depth", self.solar_seasonal_depth),
            ("subsurface_rate", self.subsurface_rate),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::Argument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !self.air_mean.is_finite() || !self.air_peak_day.is_finite() || !self.groundwater_lag_days.is_finite() {
            return Err(SimError::Argument("weather parameters must be finite".into()));
        }
        Ok(())
    }

    /// Clear-sky radiation for a day of year before the per-site scale.
    pub fn clear_sky(&self, doy: u32) -> f64 {
        let c = (2.0 * PI * (doy as f64 - 172.0) / 365.0).cos();
        self.solar_max * (1.0 - self.solar_seasonal_depth * (1.0 - c) / 2.0)
    }
}

fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn site_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ar1(prev: f64, rho: f64, sd: f64, rng: &mut ChaCha8Rng) -> f64 {
    rho * prev + sd * (1.0 - rho * rho).sqrt() * normal(rng)
}

/// Daily drivers for every site; values are rounded to two decimals so the
/// stored table is exactly what the descriptions show.
pub fn generate_weather(
    sites: &[String],
    days: usize,
    p: &WeatherGenParams,
) -> Result<Dataset, SimError> {
    p.validate()?;
    if days == 0 {
        return Err(SimError::Argument("days must be >= 1".into()));
    }
    let logit_mean = {
        let m = p.cloud_mean.clamp(1e-3, 1.0 - 1e-3);
        (m / (1.0 - m)).ln()
    };
    let rain = Exp::new(1.0).expect("positive rate");
    let mut samples = Vec::with_capacity(sites.len() * days);
    for (si, site) in sites.iter().enumerate() {
        let mut rng = site_rng(p.seed, si as u64 + 1);
        let air_offset = p.site_air_offset_sd * normal(&mut rng);
        let solar_scale = (1.0 + p.site_solar_scale_sd * normal(&mut rng)).clamp(0.5, 1.5);
        let mut air_noise = p.air_noise_sd * normal(&mut rng);
        let mut cloud_z: f64 = normal(&mut rng);
        let mut subsurface = p.air_mean + air_offset;
        for d in 0..days {
            let date = p.start_date + Duration::days(d as i64);
            let doy = date.ordinal();
            let season = |peak: f64| (2.0 * PI * (doy as f64 - peak) / 365.0).cos();

            if d > 0 {
                air_noise = ar1(air_noise, p.air_noise_rho, p.air_noise_sd, &mut rng);
                cloud_z = ar1(cloud_z, p.cloud_persistence, 1.0, &mut rng);
            }
            let air = p.air_mean + air_offset + p.air_amplitude * season(p.air_peak_day) + air_noise;
            let cloud = if p.cloud_spread == 0.0 {
                p.cloud_mean
            } else {
                1.0 / (1.0 + (-(logit_mean + p.cloud_spread * cloud_z)).exp())
            };
            let cloud = round2(cloud);
            let solar = p.clear_sky(doy) * solar_scale * (1.0 - 0.7 * cloud);
            let wet: f64 = rng.gen();
            let amount: f64 = rain.sample(&mut rng);
            let rainfall = if wet < (2.0 * p.rain_rate * cloud).min(1.0) { p.rain_scale * amount } else { 0.0 };
            let gw = p.air_mean
                + air_offset
                + p.groundwater_amplitude * season(p.air_peak_day + p.groundwater_lag_days)
                + p.groundwater_noise_sd * normal(&mut rng);
            subsurface += p.subsurface_rate * (air - subsurface);
            let pet = (0.004 * solar * (air + 10.0) / 20.0).max(0.0);

            let mut f = Features::new();
            f.insert(RAINFALL, round2(rainfall))?;
            f.insert(AIR_TEMPERATURE, round2(air))?;
            f.insert(SOLAR_RADIATION, round2(solar))?;
            f.insert(CLOUD_COVER, cloud)?;
            f.insert(GROUNDWATER_TEMPERATURE, round2(gw))?;
            f.insert(SUBSURFACE_TEMPERATURE, round2(subsurface))?;
            f.insert(POTENTIAL_EVAPOTRANSPIRATION, round2(pet))?;
            let mut s = Sample::new(site.clone(), date);
            s.features = f;
            samples.push(s);
        }
    }
    Ok(Dataset::from_samples(samples, feature_schema())?)
}

fn driver(s: &Sample, name: &str) -> Result<f64, SimError> {
    s.features.get(name).ok_or_else(|| SimError::MissingDriver {
        feature: name.to_string(),
        site: s.site_id.clone(),
        date: s.date,
    })
}

/// Relaxation of water temperature toward the equilibrium temperature.
///
/// The label on day t is the state before day t's drivers act:
/// `T(t+1) = max(floor, T(t) + k (T_eq(t) − T(t)))`.
pub fn simulate_stream_temperature(drivers: &Dataset, p: &SimParams) -> Result<Dataset, SimError> {
    p.validate()?;
    let mut eq = Vec::with_capacity(drivers.len());
    for s in drivers.samples() {
        let air = driver(s, AIR_TEMPERATURE)?;
        let solar = driver(s, SOLAR_RADIATION)?;
        let cloud = driver(s, CLOUD_COVER)?;
        eq.push(p.equilibrium(air, solar, cloud));
    }
    let mut state: BTreeMap<String, f64> = BTreeMap::new();
    let mut i = 0;
    Ok(drivers.map_samples(|s| {
        let tw = state.entry(s.site_id.clone()).or_insert(p.initial_temp);
        s.simulated_label = Some(*tw);
        *tw = (*tw + p.k * (eq[i] - *tw)).max(p.floor);
        i += 1;
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbParams {
    /// Bias shared by all sites, °C.
    pub bias: f64,
    /// Standard deviation of the additional per-site bias, °C.
    pub site_spread: f64,
    /// Marginal standard deviation of the noise, °C.
    pub noise_sd: f64,
    /// Lag-one autocorrelation of the noise.
    pub noise_rho: f64,
    pub seed: u64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self { bias: 0.5, site_spread: 1.0, noise_sd: 0.5, noise_rho: 0.7, seed: 0 }
    }
}

impl PerturbParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(SimError::Argument(format!("noise sd must be >= 0, got {}", self.noise_sd)));
        }
        if !(self.site_spread >= 0.0) || !self.site_spread.is_finite() {
            return Err(SimError::Argument(format!("site spread must be >= 0, got {}", self.site_spread)));
        }
        if !(0.0..1.0).contains(&self.noise_rho) {
            return Err(SimError::Argument(format!("noise rho must lie in [0, 1), got {}", self.noise_rho)));
        }
        if !self.bias.is_finite() {
            return Err(SimError::Argument("bias must be finite".into()));
        }
        Ok(())
    }
}

/// Total bias (shared plus per-site) applied to each site, in sorted site order.
pub fn site_biases(sites: &[String], p: &PerturbParams) -> BTreeMap<String, f64> {
    let mut sorted = sites.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = site_rng(p.seed ^ 0x0b5e_7ea7, i as u64 + 1);
            let b = p.bias + p.site_spread * normal(&mut rng);
            (s, b)
        })
        .collect()
}

/// `y = max(0, ỹ + site bias + AR(1) noise)`.
pub fn perturb_to_observations(simulated: &Dataset, p: &PerturbParams) -> Result<Dataset, SimError> {
    p.validate()?;
    if let Some(s) = simulated.samples().iter().find(|s| s.simulated_label.is_none()) {
        return Err(SimError::MissingLabel { site: s.site_id.clone(), date: s.date });
    }
    let sites = simulated.sites();
    let biases = site_biases(&sites, p);
    let mut noise: BTreeMap<String, (ChaCha8Rng, Option<f64>)> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), (site_rng(p.seed, i as u64 + 1), None)))
        .collect();
    Ok(simulated.map_samples(|s| {
        let (rng, prev) = noise.get_mut(&s.site_id).expect("site present");
        let e = match *prev {
            None => p.noise_sd * normal(rng),
            Some(e) => ar1(e, p.noise_rho, p.noise_sd, rng),
        };
        *prev = Some(e);
        let sim = s.simulated_label.expect("checked above");
        s.observed_label = Some((sim + biases[&s.site_id] + e).max(0.0));
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sites(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("s{i}")).collect()
    }

    fn constant_drivers(days: usize, air: f64, solar: f64, cloud: f64) -> Dataset {
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let samples = (0..days)
            .map(|d| {
                Sample::new("s1", start + Duration::days(d as i64))
                    .with_feature(AIR_TEMPERATURE, air)
                    .with_feature(SOLAR_RADIATION, solar)
                    .with_feature(CLOUD_COVER, cloud)
            })
            .collect();
        Dataset::from_samples(samples, vec![AIR_TEMPERATURE.into(), SOLAR_RADIATION.into(), CLOUD_COVER.into()])
            .unwrap()
    }

    fn labels(ds: &Dataset) -> Vec<f64> {
        ds.samples().iter().map(|s| s.simulated_label.unwrap()).collect()
    }

    #[test]
    fn flat_weather_is_constant() {
        let p = WeatherGenParams {
            air_amplitude: 0.0,
            air_noise_sd: 0.0,
            solar_seasonal_depth: 0.0,
            rain_rate: 0.0,
            cloud_spread: 0.0,
            groundwater_amplitude: 0.0,
            groundwater_noise_sd: 0.0,
            site_air_offset_sd: 0.0,
            site_solar_scale_sd: 0.0,
            ..Default::default()
        };
        let ds = generate_weather(&sites(2), 400, &p).unwrap();
        let first = &ds.samples()[0].features;
        for s in ds.samples() {
            assert_eq!(&s.features, first);
        }
    }

    #[test]
    fn weather_is_seeded() {
        let p = WeatherGenParams { seed: 9, ..Default::default() };
        let a = generate_weather(&sites(3), 100, &p).unwrap();
        let b = generate_weather(&sites(3), 100, &p).unwrap();
        assert_eq!(a, b);
        let c = generate_weather(&sites(3), 100, &WeatherGenParams { seed: 10, ..p }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.schema(), feature_schema().as_slice());
    }

    #[test]
    fn full_cloud_caps_solar() {
        let p = WeatherGenParams { cloud_mean: 1.0, cloud_spread: 0.0, site_solar_scale_sd: 0.0, ..Default::default() };
        let ds = generate_weather(&sites(2), 366, &p).unwrap();
        for s in ds.samples() {
            let clear = p.clear_sky(s.date.ordinal());
            assert!(s.features.get(SOLAR_RADIATION).unwrap() <= 0.3 * clear + 0.005);
        }
    }

    #[test]
    fn full_relaxation() {
        let p = SimParams { k: 1.0, initial_temp: 3.0, ..Default::default() };
        let ds = constant_drivers(4, -10.0, 0.0, 0.0);
        assert_eq!(labels(&simulate_stream_temperature(&ds, &p).unwrap()), vec![3.0, 0.0, 0.0, 0.0]);
        let ds = constant_drivers(3, 10.0, 100.0, 0.5);
        let teq = p.equilibrium(10.0, 100.0, 0.5);
        assert_eq!(labels(&simulate_stream_temperature(&ds, &p).unwrap()), vec![3.0, teq, teq]);
    }

    #[test]
    fn hand_recurrence() {
        // a1 = 1 and the other coefficients zero give T_eq = air
        let p = SimParams { k: 0.5, a0: 0.0, a1: 1.0, a2: 0.0, a3: 0.0, initial_temp: 5.0, floor: 0.0 };
        let out = simulate_stream_temperature(&constant_drivers(4, 10.0, 50.0, 0.2), &p).unwrap();
        assert_eq!(labels(&out), vec![5.0, 7.5, 8.75, 9.375]);
    }

    #[test]
    fn converges_to_fixed_point() {
        let p = SimParams::default();
        let out = simulate_stream_temperature(&constant_drivers(201, 15.0, 200.0, 0.3), &p).unwrap();
        let target = p.equilibrium(15.0, 200.0, 0.3).max(0.0);
        assert!((labels(&out)[200] - target).abs() < 1e-6);
        let cold = simulate_stream_temperature(&constant_drivers(201, -20.0, 20.0, 0.9), &p).unwrap();
        assert!(labels(&cold)[200].abs() < 1e-6);
    }

    #[test]
    fn missing_driver_is_named() {
        let ds = Dataset::from_samples(
            vec![Sample::new("s1", NaiveDate::from_ymd_opt(2001, 1, 1).unwrap()).with_feature(AIR_TEMPERATURE, 1.0)],
            vec![AIR_TEMPERATURE.into()],
        )
        .unwrap();
        let err = simulate_stream_temperature(&ds, &SimParams::default()).unwrap_err();
        assert!(err.to_string().contains(SOLAR_RADIATION), "{err}");
        assert!(SimParams { k: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn perturbation_identity_and_determinism() {
        let sim = simulate_stream_temperature(&constant_drivers(50, 12.0, 150.0, 0.4), &SimParams::default()).unwrap();
        let zero = PerturbParams { bias: 0.0, site_spread: 0.0, noise_sd: 0.0, ..Default::default() };
        let obs = perturb_to_observations(&sim, &zero).unwrap();
        for s in obs.samples() {
            assert_eq!(s.observed_label, s.simulated_label);
        }
        let p = PerturbParams { seed: 4, ..Default::default() };
        assert_eq!(perturb_to_observations(&sim, &p).unwrap(), perturb_to_observations(&sim, &p).unwrap());
        assert!(perturb_to_observations(&sim, &PerturbParams { noise_sd: -1.0, ..p.clone() }).is_err());
        assert!(perturb_to_observations(&constant_drivers(3, 1.0, 1.0, 0.0), &p).is_err());
    }

    #[test]
    fn noise_variance() {
        let mut sim = constant_drivers(10_000, 0.0, 0.0, 0.0);
        sim = sim.map_samples(|s| s.simulated_label = Some(10.0));
        let p = PerturbParams { bias: 0.3, site_spread: 1.0, noise_sd: 0.5, noise_rho: 0.7, seed: 2 };
        let bias = site_biases(&sim.sites(), &p)["s1"];
        let obs = perturb_to_observations(&sim, &p).unwrap();
        let r: Vec<f64> = obs.samples().iter().map(|s| s.observed_label.unwrap() - 10.0 - bias).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        assert!((0.2..=0.3).contains(&var), "{var}");
    }

    #[test]
    fn default_task_is_plausible() {
        let w = generate_weather(&sites(2), 730, &WeatherGenParams::default()).unwrap();
        let sim = simulate_stream_temperature(&w, &SimParams::default()).unwrap();
        let l = labels(&sim);
        let max = l.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max > 18.0 && max < 35.0, "{max}");
        assert!(l.iter().any(|&v| v < 3.0));
    }

    fn driver_series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(-25.0f64..35.0, n),
                prop::collection::vec(0.0f64..400.0, n),
                prop::collection::vec(0.0f64..1.0, n),
            )
        })
    }

    fn drivers_from(air: &[f64], solar: &[f64], cloud: &[f64]) -> Dataset {
        let start = NaiveDate::from_ymd_opt(2003, 3, 1).unwrap();
        let samples = (0..air.len())
            .map(|d| {
                Sample::new("s1", start + Duration::days(d as i64))
                    .with_feature(AIR_TEMPERATURE, air[d])
                    .with_feature(SOLAR_RADIATION, solar[d])
                    .with_feature(CLOUD_COVER, cloud[d])
            })
            .collect();
        Dataset::from_samples(samples, vec![]).unwrap()
    }

    proptest! {
        #[test]
        fn labels_are_nonnegative_and_bounded((air, solar, cloud) in driver_series(), t0 in 0.0f64..30.0, k in 0.01f64..1.0) {
            let p = SimParams { k, initial_temp: t0, ..Default::default() };
            let out = labels(&simulate_stream_temperature(&drivers_from(&air, &solar, &cloud), &p).unwrap());
            let max_eq = (0..air.len()).map(|i| p.equilibrium(air[i], solar[i], cloud[i])).fold(t0, f64::max);
            for v in out {
                prop_assert!(v >= 0.0);
                prop_assert!(v <= max_eq + 1e-9);
            }
        }

        #[test]
        fn warmer_air_never_cools((air, solar, cloud) in driver_series(), lift in 0.0f64..10.0) {
            let p = SimParams::default();
            let base = labels(&simulate_stream_temperature(&drivers_from(&air, &solar, &cloud), &p).unwrap());
            let warm: Vec<f64> = air.iter().map(|a| a + lift).collect();
            let raised = labels(&simulate_stream_temperature(&drivers_from(&warm, &solar, &cloud), &p).unwrap());
            for (b, r) in base.iter().zip(&raised) {
                prop_assert!(r >= b);
            }
        }

        #[test]
        fn observations_are_nonnegative(seed in 0u64..50, bias in -5.0f64..5.0) {
            let sim = simulate_stream_temperature(&constant_drivers(40, -2.0, 50.0, 0.8), &SimParams::default()).unwrap();
            let obs = perturb_to_observations(&sim, &PerturbParams { bias, seed, ..Default::default() }).unwrap();
            prop_assert!(obs.samples().iter().all(|s| s.observed_label.unwrap() >= 0.0));
        }
    }
}
