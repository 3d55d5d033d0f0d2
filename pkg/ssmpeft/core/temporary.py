# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import os
import tempfile


class TmpFile:
    """Temporary file that is unlinked when the object goes out of scope
    unless it was committed to its final location first.

    Parameters
    ----------
    path : str
        Actual path of the file.
    """

    def __init__(self, path: str):
        self.path = path

    def __del__(self):
        self.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *args, **kwargs):
        self.cleanup()

    def commit(self, target):
        """Atomically move the file to ``target``"""
        os.replace(self.path, target)
        self.path = None

    def cleanup(self):
        if self.path is not None and os.path.exists(self.path):
            os.unlink(self.path)
        self.path = None


def temp_file(extension=".tmp", directory=None):
    """Create a temporary file with the given extension.

    Parameters
    ----------
    extension : str, optional
        By default ".tmp"
    directory : str, optional
        Directory to create the file in. Use the target's directory when the
        file is going to be committed, so the rename stays on one filesystem.

    Returns
    -------
    TmpFile
    """

    fd, path = tempfile.mkstemp(suffix=extension, dir=directory)
    os.close(fd)
    return TmpFile(path)
