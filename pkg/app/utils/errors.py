class AutofocusError(Exception):
    """Base class for all errors raised by the toolkit"""
    exit_code = 1
    status_code = 500
    label = 'Unexpected error'

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        data = {'error': self.label, 'message': self.message}
        if self.details:
            data['details'] = self.details
        return data


class ConfigurationError(AutofocusError):
    """Invalid experiment configuration, geometry or schedule"""
    exit_code = 2
    status_code = 400
    label = 'Configuration error'


class StorageError(AutofocusError):
    """File could not be read or written"""
    exit_code = 3
    status_code = 500
    label = 'I/O error'


class DivergenceError(AutofocusError):
    """Training or optimization produced a non-finite value"""
    exit_code = 4
    status_code = 500
    label = 'Divergence'


class PreconditionError(AutofocusError):
    """An operation was called with inputs violating its precondition"""
    exit_code = 5
    status_code = 422
    label = 'Precondition violated'


class ShapeError(PreconditionError):
    label = 'Shape mismatch'


class DomainError(PreconditionError):
    label = 'Out of domain'


class StateError(PreconditionError):
    label = 'Invalid state'


class DegenerateConfigurationError(PreconditionError):
    label = 'Degenerate configuration'


class PointBehindSourceError(PreconditionError):
    label = 'Point at or behind source'
