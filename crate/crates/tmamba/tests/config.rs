use tmamba::config::{ConfigError, RunConfig};
use tmamba_core::posenc::PosMode;

#[test]
fn defaults_are_valid_and_round_trip() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn parses_keys_comments_and_blank_lines() {
    let cfg = RunConfig::parse(
        "# a comment\n\
         net.rank = 3\n\
         net.size = 16, 16, 8   # trailing comment\n\
         \n\
         net.channels.1 = 12\n\
         net.use_freq = off\n\
         net.pos_mode = unshared\n\
         optim.lr = 2.5e-3\n\
         train.epochs = 0\n\
         sweep.thresholds = 0.1:0.9, 0.3:0.7\n",
    )
    .unwrap();
    assert_eq!(cfg.net.spatial_rank, 3);
    assert_eq!(cfg.net.input_size, vec![16, 16, 8]);
    assert_eq!(cfg.net.channels[1], 12);
    assert!(!cfg.net.use_freq);
    assert_eq!(cfg.net.pos_mode, PosMode::Unshared);
    assert_eq!(cfg.optim.lr, 2.5e-3);
    assert_eq!(cfg.epochs, 0);
    assert_eq!(cfg.sweep_thresholds, vec![(0.1, 0.9), (0.3, 0.7)]);
    // the synthetic data follows the network shape
    assert_eq!(cfg.synth.size, vec![16, 16, 8]);
    assert_eq!(cfg.synth.spacing.len(), 3);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

fn key_of(err: ConfigError) -> String {
    match err {
        ConfigError::Value { key, .. } => key,
        ConfigError::UnknownKey(key) => key,
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn errors_name_the_field() {
    let cases = [
        ("net.depth = two", "net.depth"),
        ("net.size = 60,60", "net.size"),
        ("net.rank = 4", "net.rank"),
        ("net.use_tim = maybe", "net.use_tim"),
        ("net.s_low = 0.95", "net.s_low"),
        ("train.batch_size = 0", "train.batch_size"),
        ("optim.lr = -1", "optim.lr"),
        ("sched.patience = 0", "sched.patience"),
        ("sweep.thresholds = 0.6:0.4", "sweep.thresholds"),
        ("net.colour = red", "net.colour"),
    ];
    for (text, key) in cases {
        let err = RunConfig::parse(text).unwrap_err();
        let msg = err.to_string();
        assert_eq!(key_of(err), key, "{text}");
        assert!(msg.contains(key), "{msg}");
    }
}

#[test]
fn syntax_errors_report_the_line() {
    match RunConfig::parse("net.rank = 2\nthis is not a pair\n") {
        Err(ConfigError::Syntax { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = RunConfig::load(std::path::Path::new("/nonexistent/run.cfg")).unwrap_err();
    assert!(matches!(err, ConfigError::Io { .. }));
}
