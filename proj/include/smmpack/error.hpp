#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smmpack {

enum class ErrorCode {
    // binary-image
    MalformedHeader,
    NotFound,
    DuplicateSectionName,
    RvaOutOfRange,
    HeaderFull,
    // cipher
    LengthNotBlockMultiple,
    // tpm-core
    IndexOutOfRange,
    SessionTableFull,
    UnknownSession,
    IndexInUse,
    HierarchyDisabled,
    UnknownIndex,
    DataTooLarge,
    NotWritten,
    PolicyMismatch,
    TrialSessionNotAllowed,
    MalformedState,
    // packer
    NotAPe,
    NoTextSection,
    AlreadyPacked,
    NoSlackForPadding,
    // boot-sim
    InvalidPlatformDescription,
    WrongPhase,
    ProtocolNotInstalled,
    DescriptorMismatch,
    UnknownHandler,
    UnknownScenario,
    ImmutableFirmwareVolume,
    AccessDenied,
    // capsule-update
    MalformedCapsule,
    UnpackedModuleInCapsule,
    PcrMismatchWithContents,
    IncompleteCapsule,
    UnknownModuleInCapsule,
    RecoveryFvMissingSealer,
    InjectedFailure,
    // generic
    InvalidArgument,
    IoError,
};

constexpr std::string_view to_string(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::DuplicateSectionName: return "DuplicateSectionName";
    case ErrorCode::RvaOutOfRange: return "RvaOutOfRange";
    case ErrorCode::HeaderFull: return "HeaderFull";
    case ErrorCode::LengthNotBlockMultiple: return "LengthNotBlockMultiple";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::SessionTableFull: return "SessionTableFull";
    case ErrorCode::UnknownSession: return "UnknownSession";
    case ErrorCode::IndexInUse: return "IndexInUse";
    case ErrorCode::HierarchyDisabled: return "HierarchyDisabled";
    case ErrorCode::UnknownIndex: return "UnknownIndex";
    case ErrorCode::DataTooLarge: return "DataTooLarge";
    case ErrorCode::NotWritten: return "NotWritten";
    case ErrorCode::PolicyMismatch: return "PolicyMismatch";
    case ErrorCode::TrialSessionNotAllowed: return "TrialSessionNotAllowed";
    case ErrorCode::MalformedState: return "MalformedState";
    case ErrorCode::NotAPe: return "NotAPe";
    case ErrorCode::NoTextSection: return "NoTextSection";
    case ErrorCode::AlreadyPacked: return "AlreadyPacked";
    case ErrorCode::NoSlackForPadding: return "NoSlackForPadding";
    case ErrorCode::InvalidPlatformDescription: return "InvalidPlatformDescription";
    case ErrorCode::WrongPhase: return "WrongPhase";
    case ErrorCode::ProtocolNotInstalled: return "ProtocolNotInstalled";
    case ErrorCode::DescriptorMismatch: return "DescriptorMismatch";
    case ErrorCode::UnknownHandler: return "UnknownHandler";
    case ErrorCode::UnknownScenario: return "UnknownScenario";
    case ErrorCode::ImmutableFirmwareVolume: return "ImmutableFirmwareVolume";
    case ErrorCode::AccessDenied: return "AccessDenied";
    case ErrorCode::MalformedCapsule: return "MalformedCapsule";
    case ErrorCode::UnpackedModuleInCapsule: return "UnpackedModuleInCapsule";
    case ErrorCode::PcrMismatchWithContents: return "PcrMismatchWithContents";
    case ErrorCode::IncompleteCapsule: return "IncompleteCapsule";
    case ErrorCode::UnknownModuleInCapsule: return "UnknownModuleInCapsule";
    case ErrorCode::RecoveryFvMissingSealer: return "RecoveryFvMissingSealer";
    case ErrorCode::InjectedFailure: return "InjectedFailure";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code;
/// the message adds context for humans, the code is what callers match on.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail))
        , code_(code)
    {
    }

    explicit Error(ErrorCode code) : Error(code, {}) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail = {})
{
    throw Error(code, detail);
}

} // namespace smmpack
