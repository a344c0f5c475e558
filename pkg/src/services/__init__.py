# Application services