#pragma once

#include <stdexcept>
#include <string>

namespace uasparse {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Numerics / model
class ShapeMismatch : public Error { public: using Error::Error; };
class IndexOutOfRange : public Error { public: using Error::Error; };
class MissingGradient : public Error { public: using Error::Error; };

// Embeddings / data
class EmptyCorpus : public Error { public: using Error::Error; };
class FileNotFound : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };

// Pipeline
class MissingClass : public Error { public: using Error::Error; };
class EmptyEvaluationSet : public Error { public: using Error::Error; };

class NonFiniteLoss : public Error {
public:
    NonFiniteLoss(int epoch, int batch)
        : Error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                std::to_string(batch)),
          epoch_(epoch), batch_(batch) {}
    int epoch() const noexcept { return epoch_; }
    int batch() const noexcept { return batch_; }

private:
    int epoch_;
    int batch_;
};

// Vulnerability scoring
class EmptyTuple : public Error { public: using Error::Error; };
class NetworkError : public Error { public: using Error::Error; };
class RateLimited : public Error { public: using Error::Error; };
class MalformedResponse : public Error { public: using Error::Error; };
class NoScorableEntries : public Error { public: using Error::Error; };
class MissingGeoTable : public Error { public: using Error::Error; };

} // namespace uasparse
