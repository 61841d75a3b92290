//! Rendering a route table as nginx configuration.

use std::fmt::Write;

use simdesk_core::routes::RouteTable;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportOptions {
    /// Port the virtual hosts listen on.
    pub listen: u16,
    /// Certificate and key paths; enables `ssl` on the listen directive.
    pub tls: Option<(String, String)>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions { listen: 80, tls: None }
    }
}

/// [`export_with`] using default options (plain HTTP on port 80).
pub fn export_proxy_config(table: &RouteTable) -> String {
    export_with(table, &ExportOptions::default())
}

/// One `server` block per HTTP route inside `http {}` and one per stream route
/// inside `stream {}`, in hostname and port order.
pub fn export_with(table: &RouteTable, opts: &ExportOptions) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# simdesk routes, generation {}", table.generation);
    out.push_str("http {\n");
    out.push_str("    map $http_upgrade $connection_upgrade {\n");
    out.push_str("        default upgrade;\n");
    out.push_str("        ''      close;\n");
    out.push_str("    }\n");
    // BTreeMap iteration is already sorted.
    for (host, backend) in &table.http_routes {
        out.push('\n');
        out.push_str("    server {\n");
        match &opts.tls {
            Some((cert, key)) => {
                let _ = writeln!(out, "        listen {} ssl;", opts.listen);
                let _ = writeln!(out, "        ssl_certificate {cert};");
                let _ = writeln!(out, "        ssl_certificate_key {key};");
            }
            None => {
                let _ = writeln!(out, "        listen {};", opts.listen);
            }
        }
        let _ = writeln!(out, "        server_name {host};");
        out.push_str("        location / {\n");
        let _ = writeln!(out, "            proxy_pass http://{backend};");
        out.push_str("            proxy_http_version 1.1;\n");
        out.push_str("            proxy_set_header Host $host;\n");
        out.push_str("            proxy_set_header Upgrade $http_upgrade;\n");
        out.push_str("            proxy_set_header Connection $connection_upgrade;\n");
        out.push_str("            proxy_set_header X-Forwarded-For $proxy_add_x_forwarded_for;\n");
        out.push_str("        }\n");
        out.push_str("    }\n");
    }
    out.push_str("}\n\nstream {\n");
    for (i, (port, backend)) in table.stream_routes.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str("    server {\n");
        let _ = writeln!(out, "        listen {port};");
        let _ = writeln!(out, "        proxy_pass {backend};");
        out.push_str("    }\n");
    }
    out.push_str("}\n");
    out
}
