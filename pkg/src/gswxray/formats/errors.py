class FormatError(ValueError):
    """A document could not be read or written.

    ``where`` names the offending location: an XML element path, a line
    number, a frame index or a layer name.
    """

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class CorruptRecordError(FormatError):
    pass
