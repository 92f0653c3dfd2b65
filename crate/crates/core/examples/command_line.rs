//! Drives the whole toy pipeline through the command-line entry point.

fn main() {
    let dir = std::env::temp_dir().join("voxclone-example-cli");
    let _ = std::fs::remove_dir_all(&dir);
    let p = |rel: &str| dir.join(rel).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["make-toy-corpus".into(), "--out".into(), p("toy"), "--speakers".into(), "5".into(), "--utterances".into(), "6".into(), "--unseen".into(), "2".into()],
        vec!["preprocess".into(), "--manifest".into(), p("toy/manifest.tsv"), "--out".into(), p("cache")],
        vec!["train-encoder".into(), "--cache".into(), p("cache"), "--out".into(), p("enc.vxck"), "--steps".into(), "30".into()],
        vec!["train-tts".into(), "--cache".into(), p("cache"), "--encoder".into(), p("enc.vxck"), "--out".into(), p("tts.vxck"), "--steps".into(), "30".into()],
        vec!["evaluate-similarity".into(), "--cache".into(), p("cache"), "--tts".into(), p("tts.vxck"), "--scorer".into(), p("enc.vxck"), "--out".into(), p("similarity")],
    ];
    for argv in steps {
        let verb = argv[0].clone();
        let code = voxclone::cli::run(argv);
        println!("{verb}: exit {code}");
        if code != 0 {
            std::process::exit(code);
        }
    }
}
