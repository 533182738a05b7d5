#pragma once

#include <stdexcept>
#include <string>

namespace crowncut {

// Base for everything this library throws on bad data or bad usage.
// The CLI maps these to exit code 2; programming errors stay asserts.
class CrownError : public std::runtime_error {
public:
    explicit CrownError(const std::string& msg) : std::runtime_error(msg) {}
};

class MissingFile : public CrownError {
public:
    explicit MissingFile(const std::string& path)
        : CrownError("missing file: " + path) {}
};

class IoFailure : public CrownError {
public:
    explicit IoFailure(const std::string& msg) : CrownError("i/o failure: " + msg) {}
};

class MalformedRaster : public CrownError {
public:
    explicit MalformedRaster(const std::string& msg)
        : CrownError("malformed raster: " + msg) {}
};

class UnsupportedBitDepth : public CrownError {
public:
    explicit UnsupportedBitDepth(const std::string& msg)
        : CrownError("unsupported bit depth: " + msg) {}
};

class ShapeMismatch : public CrownError {
public:
    explicit ShapeMismatch(const std::string& msg)
        : CrownError("shape mismatch: " + msg) {}
};

class DegenerateImage : public CrownError {
public:
    explicit DegenerateImage(const std::string& msg)
        : CrownError("degenerate image: " + msg) {}
};

class DivergedEstimate : public CrownError {
public:
    explicit DivergedEstimate(const std::string& msg)
        : CrownError("diverged estimate: " + msg) {}
};

// Registration failure annotated with the band pair that failed.
class AlignmentPairError : public CrownError {
public:
    AlignmentPairError(const std::string& moving, const std::string& fixed,
                       const std::string& why)
        : CrownError("alignment pair " + moving + "->" + fixed + ": " + why),
          moving_band_(moving), fixed_band_(fixed) {}

    const std::string& moving_band() const { return moving_band_; }
    const std::string& fixed_band() const { return fixed_band_; }

private:
    std::string moving_band_;
    std::string fixed_band_;
};

class InvalidConfig : public CrownError {
public:
    explicit InvalidConfig(const std::string& msg)
        : CrownError("invalid config: " + msg) {}
};

class MalformedModelFile : public CrownError {
public:
    explicit MalformedModelFile(const std::string& msg)
        : CrownError("malformed model file: " + msg) {}
};

class ConfigMismatch : public CrownError {
public:
    explicit ConfigMismatch(const std::string& msg)
        : CrownError("config mismatch: " + msg) {}
};

class EmptyDataset : public CrownError {
public:
    explicit EmptyDataset(const std::string& msg)
        : CrownError("empty dataset: " + msg) {}
};

class EmptyCalibrationSet : public CrownError {
public:
    explicit EmptyCalibrationSet(const std::string& msg)
        : CrownError("empty calibration set: " + msg) {}
};

class MissingCalibration : public CrownError {
public:
    explicit MissingCalibration(const std::string& tensor)
        : CrownError("missing calibration for tensor: " + tensor) {}
};

class PlacementFailure : public CrownError {
public:
    explicit PlacementFailure(const std::string& msg)
        : CrownError("placement failure: " + msg) {}
};

} // namespace crowncut
