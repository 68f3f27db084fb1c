use serde_json::json;

/// Human-readable or JSON-line logging on stderr.
pub struct Log {
    json: bool,
}

impl Log {
    pub fn new(json: bool) -> Self {
        Log { json }
    }

    fn emit(&self, level: &str, msg: &str) {
        if self.json {
            eprintln!("{}", json!({"level": level, "msg": msg}));
        } else if level == "info" {
            eprintln!("{msg}");
        } else {
            eprintln!("{level}: {msg}");
        }
    }

    pub fn info(&self, msg: &str) {
        self.emit("info", msg);
    }

    pub fn warn(&self, msg: &str) {
        self.emit("warn", msg);
    }

    pub fn error(&self, msg: &str) {
        self.emit("error", msg);
    }
}
