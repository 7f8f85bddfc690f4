use std::collections::HashSet;

use super::*;

fn task(profile: Profile) -> TaskSpec {
    make_task(1, Month::Jun, profile, 7).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parses a rendered state back into its fields.
fn parse_state(x: &str) -> ClusterState {
    let mut lines = x.lines().peekable();
    let field = |l: &str, p: &str| l.strip_prefix(p).unwrap_or_else(|| panic!("expected {p:?} in {l:?}")).to_string();
    let cell_name = field(lines.next().unwrap(), "cell: ");
    let location = field(lines.next().unwrap(), "location: ");
    let ts = |l: &str| NaiveDateTime::parse_from_str(l.trim_matches('\''), "%Y-%m-%dT%H:%M:%SZ").unwrap();
    let window_start = ts(lines.next().unwrap());
    let window_end = ts(lines.next().unwrap());
    let users = field(lines.next().unwrap(), "Large users: [");
    let top_users = users
        .trim_end_matches(']')
        .split(", ")
        .map(|u| u.trim_matches('\'').to_string())
        .collect();
    let space = field(lines.next().unwrap(), "search_space: ");
    let scheduler_hyperparams = space
        .trim_start_matches('{')
        .trim_end_matches('}')
        .split("} {")
        .map(|item| {
            let (name, vals) = item.split_once(": [").unwrap();
            let name = name.trim_matches('\'').to_string();
            let vals: Vec<&str> = vals.trim_end_matches(']').split(", ").collect();
            let domain = if vals[0].starts_with('\'') {
                Domain::Categorical(vals.iter().map(|v| v.trim_matches('\'').to_string()).collect())
            } else {
                let lo: f64 = vals[0].parse().unwrap();
                let hi: f64 = vals[1].parse().unwrap();
                let template = scheduler_hyperparams().into_iter().find(|h| h.name == name).unwrap();
                let step = match template.domain {
                    Domain::Numeric { step, .. } => step,
                    _ => panic!("numeric expected"),
                };
                Domain::Numeric { lo, hi, step }
            };
            HyperParam { name, domain }
        })
        .collect();
    let asg = field(lines.next().unwrap(), "assignments: {");
    let assignments = asg
        .trim_end_matches('}')
        .split(", ")
        .map(|kv| {
            let (k, v) = kv.split_once(": ").unwrap();
            let v = if v.starts_with('"') {
                HyperValue::Choice(v.trim_matches('"').to_string())
            } else {
                HyperValue::Number(v.parse().unwrap())
            };
            (k.trim_matches('"').to_string(), v)
        })
        .collect();
    assert_eq!(lines.next().unwrap(), "distributions:");
    let num = |l: &str, p: &str| -> f64 { field(l.trim_start(), p).parse().unwrap() };
    let mut platform_distributions = Vec::new();
    while lines.peek().unwrap().starts_with("- platform:") {
        let platform = field(lines.next().unwrap(), "- platform: {").trim_end_matches('}').to_string();
        platform_distributions.push(PlatformDist {
            platform,
            num_machines: num(lines.next().unwrap(), "num_machines: "),
            low_level_zones: num(lines.next().unwrap(), "low_level_zones: "),
            mid_level_zones: num(lines.next().unwrap(), "mid_level_zones: "),
            high_level_zones: num(lines.next().unwrap(), "high_level_zones: "),
            resources: num(lines.next().unwrap(), "resources: "),
        });
    }
    assert_eq!(lines.next().unwrap(), "job_profiles:");
    let mut job_profiles = Vec::new();
    while let Some(l) = lines.next() {
        let head = field(l, "- job: {user: ");
        let (user, group) = head.trim_end_matches('}').split_once(", group_name: ").unwrap();
        assert_eq!(lines.next().unwrap(), "  platform_profiles:");
        let mut profs = Vec::new();
        while lines.peek().unwrap().starts_with("    ") {
            let l = lines.next().unwrap().trim();
            let (p, rest) = l.split_once(": {mean_mips_per_resource_usage: ").unwrap();
            profs.push((p.to_string(), rest.trim_end_matches('}').parse().unwrap()));
        }
        let lim = field(lines.next().unwrap(), "  limits: {job_requested_resource_limit: ");
        let (a, b) = lim.trim_end_matches('}').split_once(", job_requested_num_vms: ").unwrap();
        job_profiles.push(JobProfile {
            user: user.to_string(),
            group_name: group.to_string(),
            platform_profiles: profs,
            job_requested_resource_limit: a.parse().unwrap(),
            job_requested_num_vms: b.parse().unwrap(),
        });
    }
    ClusterState {
        cell_name,
        location,
        window_start,
        window_end,
        top_users,
        scheduler_hyperparams,
        assignments,
        platform_distributions,
        job_profiles,
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

#[test]
fn scientific_format() {
    assert_eq!(fmt_sci(1239.0), "1.239e+03");
    assert_eq!(fmt_sci(0.05), "5.000e-02");
    assert_eq!(fmt_sci(548_100.0), "5.481e+05");
    assert_eq!(fmt_sci(0.9721), "9.721e-01");
    assert_eq!(quantize(1238.6), 1239.0);
}

#[test]
fn task_is_deterministic() {
    assert_eq!(task(Profile::LowNoise), task(Profile::LowNoise));
    let t = task(Profile::LowNoise);
    assert_eq!(t.task_id, "C1_JUN");
    assert_eq!(t.cell_name, "cell_a");
    assert_eq!(cell_letter(27), "aa");
}

#[test]
fn spread_decreases_with_k() {
    for month in [Month::Jun, Month::Nov] {
        let s: Vec<f64> = (1..=5).map(|k| make_task(k, month, Profile::Noisy, 3).unwrap().spread).collect();
        assert!(s.windows(2).all(|w| w[0] > w[1]), "{s:?}");
    }
    assert!(make_task(0, Month::Jun, Profile::Noisy, 3).is_err());
}

#[test]
fn bimodal_modes_are_separable() {
    let t = task(Profile::Bimodal);
    assert!(t.bimodal);
    assert!(t.mode_gap > 4.0 * t.noise_sigma);
    assert!(!task(Profile::Noisy).bimodal);
}

#[test]
fn valid_range_brackets_means() {
    for p in [Profile::LowNoise, Profile::Noisy, Profile::Bimodal] {
        for k in 1..=5 {
            let t = make_task(k, Month::Nov, p, 11).unwrap();
            let [lo, hi] = t.valid_range;
            assert!(lo <= 500.0 && hi >= 3000.0);
            let mut r = rng(k as u64);
            for _ in 0..2000 {
                let s = sample_state(&t, &mut r);
                let m = true_mean(&t, &s).unwrap();
                let pad = t.mode_gap / 2.0 + 4.0 * t.noise_sigma;
                assert!(m - pad >= lo && m + pad <= hi, "{p} k={k}: {m}");
            }
        }
    }
}

#[test]
fn task_spec_file_roundtrip() {
    let t = task(Profile::Bimodal);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("C1_JUN.toml");
    save_task_spec(&t, &path).unwrap();
    assert_eq!(load_task_spec(&path).unwrap(), t);
}

#[test]
fn state_sampling_is_reproducible() {
    let t = task(Profile::Noisy);
    assert_eq!(sample_state(&t, &mut rng(5)), sample_state(&t, &mut rng(5)));
}

#[test]
fn windows_stay_in_month_and_states_are_unique() {
    let t = make_task(2, Month::Nov, Profile::Noisy, 1).unwrap();
    let mut r = rng(9);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let s = sample_state(&t, &mut r);
        assert_eq!(s.window_start.year(), 2024);
        assert_eq!(s.window_start.month(), 11);
        assert!(s.window_start < s.window_end);
        assert!(seen.insert(render_yaml(&s)));
        for j in &s.job_profiles {
            for (p, _) in &j.platform_profiles {
                assert!(s.platform_distributions.iter().any(|d| &d.platform == p));
            }
        }
    }
}

#[test]
fn degenerate_task_has_flat_mean() {
    let mut t = task(Profile::LowNoise);
    t.daily_amplitude = 0.0;
    t.weekly_amplitude = 0.0;
    t.hyperparam_weights.iter_mut().for_each(|w| *w = 0.0);
    t.platform_effects.values_mut().for_each(|w| *w = 0.0);
    t.platform_center = 0.0;
    t.user_effects.values_mut().for_each(|w| *w = 0.0);
    t.user_center = 0.0;
    t.noise_sigma = 0.0;
    let mut r = rng(1);
    for _ in 0..100 {
        let s = sample_state(&t, &mut r);
        assert_eq!(true_mean(&t, &s).unwrap(), t.base_level);
        assert_eq!(true_variance(&t, &s).unwrap(), 0.0);
        assert_eq!(draw_y(&t, &s, &mut r).unwrap(), t.base_level);
    }
}

#[test]
fn foreign_state_rejected() {
    let a = task(Profile::Noisy);
    let b = make_task(2, Month::Jun, Profile::Noisy, 7).unwrap();
    let s = sample_state(&b, &mut rng(0));
    assert!(true_mean(&a, &s).is_err());
    assert!(true_variance(&a, &s).is_err());
    let nov = make_task(1, Month::Nov, Profile::Noisy, 7).unwrap();
    assert!(true_mean(&a, &sample_state(&nov, &mut rng(0))).is_err());
}

#[test]
fn draws_match_oracle_moments() {
    let t = task(Profile::Noisy);
    let s = sample_state(&t, &mut rng(3));
    let mut r = rng(4);
    let ys: Vec<f64> = (0..100_000).map(|_| draw_y(&t, &s, &mut r).unwrap()).collect();
    let (m, v) = mean_var(&ys);
    let mu = true_mean(&t, &s).unwrap();
    let var = true_variance(&t, &s).unwrap();
    let n = ys.len() as f64;
    assert!((m - mu).abs() < 3.0 * (var / n).sqrt(), "{m} vs {mu}");
    // SE of the sample variance of a Gaussian: var·sqrt(2/n)
    assert!((v - var).abs() < 3.0 * var * (2.0 / n).sqrt(), "{v} vs {var}");
    assert!(ys.iter().all(|y| (t.valid_range[0]..=t.valid_range[1]).contains(y)));
}

#[test]
fn bimodal_draws_split_into_two_components() {
    let t = task(Profile::Bimodal);
    let mut r = rng(8);
    let s = loop {
        let s = sample_state(&t, &mut r);
        if in_bimodal_window(&t, &s) {
            break s;
        }
    };
    let (lo, hi) = mode_centers(&t, &s).unwrap().unwrap();
    let mu = true_mean(&t, &s).unwrap();
    let ys: Vec<f64> = (0..10_000).map(|_| draw_y(&t, &s, &mut r).unwrap()).collect();
    let (below, above): (Vec<f64>, Vec<f64>) = ys.iter().partition(|&&y| y < mu);
    let se = |n: usize| 3.0 * t.noise_sigma / (n as f64).sqrt();
    // truncation of each component at the midpoint is negligible at gap > 4σ
    assert!((mean_var(&below).0 - lo).abs() < se(below.len()));
    assert!((mean_var(&above).0 - hi).abs() < se(above.len()));
    let share = below.len() as f64 / ys.len() as f64;
    assert!((share - 0.5).abs() < 0.03);
    let outside = loop {
        let s = sample_state(&t, &mut r);
        if !in_bimodal_window(&t, &s) {
            break s;
        }
    };
    assert!(mode_centers(&t, &outside).unwrap().is_none());
    assert_eq!(true_variance(&t, &outside).unwrap(), t.noise_sigma * t.noise_sigma);
}

#[test]
fn render_layout() {
    let t = task(Profile::LowNoise);
    let mut r = rng(2);
    let s = sample_state(&t, &mut r);
    let x = render_yaml(&s);
    assert!(x.starts_with("cell: cell_a\n"));
    assert_eq!(x.matches("- platform:").count(), s.platform_distributions.len());
    let order = ["cell: ", "'2024-06", "Large users:", "search_space:", "assignments:", "distributions:", "job_profiles:"];
    let pos: Vec<usize> = order.iter().map(|p| x.find(p).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));

    let mut two = s.clone();
    two.platform_distributions.truncate(1);
    let mut extra = two.platform_distributions[0].clone();
    extra.platform = "machineF".into();
    two.platform_distributions.push(extra);
    assert_eq!(render_yaml(&two).matches("- platform:").count(), 2);
}

#[test]
fn render_parses_back() {
    let t = task(Profile::Bimodal);
    let mut r = rng(12);
    for _ in 0..200 {
        let s = sample_state(&t, &mut r);
        assert_eq!(parse_state(&render_yaml(&s)), s);
    }
}

#[test]
fn head_truncation_keeps_cell_window_and_users() {
    let t = task(Profile::LowNoise);
    let mut r = rng(21);
    for _ in 0..500 {
        let s = sample_state(&t, &mut r);
        let x = render_yaml(&s);
        let head = &x[..256.min(x.len())];
        assert!(head.contains("cell: cell_a"));
        assert!(head.contains(&format!("'{}'", s.window_end.format("%Y-%m-%dT%H:%M:%SZ"))));
        assert!(head.contains(&project_features(&s, FeatureMask::USERS)));
        assert!(!head.contains("job_profiles:"));
    }
}

#[test]
fn projections() {
    let t = task(Profile::LowNoise);
    let mut r = rng(4);
    let s = sample_state(&t, &mut r);
    assert_eq!(project_features(&s, FeatureMask::FULL), render_yaml(&s));
    assert_eq!(project_features(&s, FeatureMask::NULL), "");
    let mut later = s.clone();
    later.window_start += Duration::hours(3);
    later.window_end += Duration::hours(3);
    assert_eq!(
        project_features(&s, FeatureMask::HYPERPARAMS),
        project_features(&later, FeatureMask::HYPERPARAMS)
    );
    assert_ne!(project_features(&s, FeatureMask::WINDOW), project_features(&later, FeatureMask::WINDOW));
    let x = render_yaml(&s);
    for bits in 0..64u8 {
        let m = FeatureMask(bits);
        assert_eq!(project_text(&x, m), project_features(&s, m), "mask {m}");
        assert_eq!(project_text(&project_text(&x, m), m), project_text(&x, m));
    }
}

#[test]
fn mask_parsing() {
    assert_eq!(FeatureMask::parse("null").unwrap(), FeatureMask::NULL);
    assert_eq!(FeatureMask::parse("full").unwrap(), FeatureMask::FULL);
    assert_eq!(FeatureMask::parse("WR").unwrap(), FeatureMask::WINDOW.union(FeatureMask::REST));
    assert_eq!(FeatureMask::parse("CWR").unwrap(), FeatureMask::FULL);
    assert_eq!(FeatureMask::parse("hyperparams").unwrap(), FeatureMask::HYPERPARAMS);
    assert_eq!(
        FeatureMask::parse("CELL,window").unwrap(),
        FeatureMask::CELL.union(FeatureMask::WINDOW)
    );
    assert!(FeatureMask::parse("cell,bogus").is_err());
    for m in [FeatureMask::NULL, FeatureMask::FULL, FeatureMask::HYPERPARAMS, FeatureMask::REST] {
        assert_eq!(FeatureMask::parse(&m.to_string()).unwrap(), m);
    }
}

#[test]
fn dataset_splits_and_determinism() {
    let t = task(Profile::LowNoise);
    let d = generate_dataset(&t, 1000, 3).unwrap();
    assert_eq!(d.counts(), (800, 100, 100));
    assert_eq!(d.to_jsonl().unwrap(), generate_dataset(&t, 1000, 3).unwrap().to_jsonl().unwrap());
    assert_ne!(d.to_jsonl().unwrap(), generate_dataset(&t, 1000, 4).unwrap().to_jsonl().unwrap());
    assert!(generate_dataset(&t, 9, 3).is_err());
    assert_eq!(split_sizes(5000), (4000, 500, 500));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    d.write_jsonl(&p).unwrap();
    assert_eq!(RegressionDataset::read_jsonl(&p).unwrap(), d);
    let first = d.to_jsonl().unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    for k in ["task_id", "cell", "month", "split", "x", "y"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    assert_eq!(v["month"], "JUN");
}

#[test]
fn empirical_variance_matches_spread() {
    let t = task(Profile::LowNoise);
    let d = generate_dataset(&t, 20_000, 5).unwrap();
    let ys: Vec<f64> = d.records.iter().map(|r| r.y).collect();
    let (_, v) = mean_var(&ys);
    assert!((v / t.spread - 1.0).abs() < 0.1, "{v} vs {}", t.spread);
}

#[test]
fn oracle_lookup() {
    let t = task(Profile::Noisy);
    let (d, states) = generate_with_states(&t, 50, 1).unwrap();
    let o = Oracle::new(&t, &d, &states);
    for (r, s) in d.records.iter().zip(&states) {
        assert_eq!(o.mean(&r.x).unwrap(), true_mean(&t, s).unwrap());
    }
    assert!(o.mean("cell: nowhere\n").is_err());
}
