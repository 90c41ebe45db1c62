#pragma once

// Streaming metric-record serialization. CSV columns are exactly
// metric,layer,head,position,dimension,value,n with empty cells for absent
// optional indices; JSON is an array of objects with the same keys (null for
// absent). Values carry 9 significant digits. Records stream straight to
// disk; nothing is buffered beyond one line.

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <string>

#include "sinklab/common.hpp"
#include "sinklab/diagnostics.hpp"

namespace sinklab {

enum class ReportFormat { Csv, Json };

class ReportWriter {
  public:
    ReportWriter(const std::string& path, ReportFormat fmt) : path_(path), fmt_(fmt) {
        f_ = std::fopen(path.c_str(), "wb");
        if (!f_) throw IoError("cannot open report for writing: " + path);
        if (fmt_ == ReportFormat::Csv)
            put("metric,layer,head,position,dimension,value,n\n");
        else
            put("[");
    }
    ~ReportWriter() {
        if (f_) {
            try {
                close();
            } catch (...) {
            }
        }
    }
    ReportWriter(const ReportWriter&) = delete;
    ReportWriter& operator=(const ReportWriter&) = delete;

    void add(const MetricRecord& r) {
        char value[40];
        std::snprintf(value, sizeof value, "%.9g", r.value);
        char line[512];
        if (fmt_ == ReportFormat::Csv) {
            std::snprintf(line, sizeof line, "%s,%s,%s,%s,%s,%s,%" PRId64 "\n", r.metric.c_str(),
                          idx(r.layer).c_str(), idx(r.head).c_str(), idx(r.position).c_str(),
                          idx(r.dimension).c_str(), value, r.n);
        } else {
            std::snprintf(line, sizeof line,
                          "%s\n  {\"metric\": \"%s\", \"layer\": %s, \"head\": %s, "
                          "\"position\": %s, \"dimension\": %s, \"value\": %s, \"n\": %" PRId64 "}",
                          first_ ? "" : ",", r.metric.c_str(), jidx(r.layer).c_str(),
                          jidx(r.head).c_str(), jidx(r.position).c_str(), jidx(r.dimension).c_str(),
                          value, r.n);
        }
        put(line);
        first_ = false;
    }

    void close() {
        if (!f_) return;
        if (fmt_ == ReportFormat::Json) put("\n]\n");
        const bool ok = std::fclose(f_) == 0;
        f_ = nullptr;
        if (!ok) throw IoError("close failed: " + path_);
    }

  private:
    static std::string idx(int64_t v) { return v < 0 ? std::string() : std::to_string(v); }
    static std::string jidx(int64_t v) { return v < 0 ? std::string("null") : std::to_string(v); }
    void put(const char* s) {
        const size_t n = std::strlen(s);
        if (std::fwrite(s, 1, n, f_) != n) throw IoError("write failed: " + path_);
    }

    std::string path_;
    ReportFormat fmt_;
    std::FILE* f_ = nullptr;
    bool first_ = true;
};

}  // namespace sinklab
