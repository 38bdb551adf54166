#![no_main]
use g3dk_core::synthscene::parse_episode_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|line: &str| {
    if let Ok(rec) = parse_episode_line(line) {
        let text = serde_json::to_string(&rec).expect("record serializes");
        assert_eq!(parse_episode_line(&text).expect("re-serialized line parses"), rec);
    }
});
